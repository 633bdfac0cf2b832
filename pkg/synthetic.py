"""Seeded synthetic scenes for exercising the pipeline without licensed datasets."""
from dataclasses import dataclass

import numpy as np

from exceptions import ConfigurationError
from hsi_io import HsiCube, LabelMap, default_palette
from utils import setup_logging

logger = setup_logging()


@dataclass
class SyntheticScene:
    cube: HsiCube
    labels: LabelMap
    train_mask: LabelMap
    palette: dict
    prototypes: np.ndarray


def make_synthetic(height=32, width=32, bands=32, num_classes=4, labeled=200,
                   train_per_class=10, block=8, noise=0.05, seed=0):
    """Blocky scene of ``num_classes`` spectral prototypes plus Gaussian noise.

    The image is tiled into ``block``×``block`` squares; shuffled squares take
    classes cyclically so every class covers the same area. ``labeled`` pixels,
    balanced over classes, carry reference labels, and ``train_per_class`` of
    each class form the fixed training mask.
    """
    n_blocks = -(-height // block) * -(-width // block)
    if num_classes < 1 or n_blocks < num_classes:
        raise ConfigurationError(f"{n_blocks} blocks cannot host {num_classes} classes")
    per_class = labeled // num_classes
    if per_class < train_per_class or per_class < 1:
        raise ConfigurationError(f"{labeled} labeled pixels give {per_class} per class, need ≥ {max(train_per_class, 1)}")

    rng = np.random.default_rng(seed)
    prototypes = rng.uniform(0.1, 0.9, size=(num_classes, bands))

    block_cols = -(-width // block)
    block_class = np.empty(n_blocks, dtype=np.int64)
    block_class[rng.permutation(n_blocks)] = np.arange(n_blocks) % num_classes + 1
    ys, xs = np.mgrid[0:height, 0:width]
    class_map = block_class[(ys // block) * block_cols + xs // block]

    data = prototypes[class_map - 1] + noise * rng.standard_normal((height, width, bands))

    labels = np.zeros((height, width), dtype=np.uint16)
    mask = np.zeros((height, width), dtype=np.uint16)
    for cls in range(1, num_classes + 1):
        pixels = np.flatnonzero(class_map.ravel() == cls)
        if len(pixels) < per_class:
            raise ConfigurationError(f"class {cls} covers {len(pixels)} pixels, fewer than {per_class}")
        chosen = rng.choice(pixels, size=per_class, replace=False)
        labels.ravel()[chosen] = cls
        mask.ravel()[chosen[:train_per_class]] = cls

    names = [f"class_{i}" for i in range(1, num_classes + 1)]
    logger.info(f"Synthetic scene {height}x{width}x{bands}, {num_classes} classes, {per_class * num_classes} labeled")
    return SyntheticScene(
        cube=HsiCube(data.astype(np.float32)),
        labels=LabelMap(labels, num_classes, names),
        train_mask=LabelMap(mask, num_classes, names),
        palette=default_palette(num_classes),
        prototypes=prototypes,
    )
