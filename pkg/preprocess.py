"""PCA spectral reduction, patch extraction around labeled pixels, and splitting."""
import math
from dataclasses import dataclass, field

import numpy as np

from exceptions import ConfigurationError, DimensionError, NumericError
from hsi_io import HsiCube
from utils import setup_logging

logger = setup_logging()

TRAIN, VAL, TEST = "train", "val", "test"


# ---------------------------------------------------------------- PCA

@dataclass
class PcaModel:
    """Per-band mean, C×B orthonormal projection and the B leading eigenvalues."""
    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    total_variance: float = 0.0

    @property
    def input_bands(self):
        return self.components.shape[0]

    @property
    def output_bands(self):
        return self.components.shape[1]

    def explained_variance_ratio(self):
        if self.total_variance <= 0:
            return np.zeros_like(self.eigenvalues)
        return self.eigenvalues / self.total_variance

    def to_params(self):
        """Arrays under the reserved checkpoint names."""
        return {
            "pca.mean": self.mean,
            "pca.components": self.components,
            "pca.eigenvalues": self.eigenvalues,
            "pca.total_variance": np.array([self.total_variance]),
        }

    @classmethod
    def from_params(cls, params):
        total = params.get("pca.total_variance")
        return cls(
            mean=np.asarray(params["pca.mean"], dtype=np.float64),
            components=np.asarray(params["pca.components"], dtype=np.float64),
            eigenvalues=np.asarray(params["pca.eigenvalues"], dtype=np.float64),
            total_variance=float(total[0]) if total is not None else 0.0,
        )


def jacobi_eigh(matrix, tol=1e-9, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Iterates until the off-diagonal Frobenius norm drops below
    ``tol · max(1, ‖A‖_F)``.

    Returns:
        tuple: (eigenvalues, eigenvectors as columns, sweeps used), unsorted
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    threshold = tol * max(1.0, float(np.linalg.norm(a)))

    for sweep in range(max_sweeps + 1):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off < threshold:
            return np.diag(a).copy(), v, sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q

                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q

    raise NumericError(f"Jacobi eigensolver did not converge after {max_sweeps} sweeps (off-diagonal norm {off:.3e})")


def pca_fit(cube, retain, sample_stride=1):
    """Fit a PCA projection keeping ``retain`` components.

    Args:
        cube (HsiCube): Source scene
        retain (int): Number of components B, 1 ≤ B ≤ C
        sample_stride (int): Use every n-th pixel (row-major) for the covariance

    Returns:
        PcaModel: Components sorted by descending eigenvalue, each signed so its
        largest-magnitude entry is positive
    """
    bands = cube.bands
    if not 1 <= retain <= bands:
        raise ConfigurationError(f"cannot retain {retain} components from {bands} bands")
    if sample_stride < 1:
        raise ConfigurationError(f"sample_stride must be ≥ 1, got {sample_stride}")

    pixels = cube.data.reshape(-1, bands)[::sample_stride].astype(np.float64)
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / max(len(pixels) - 1, 1)
    cov = 0.5 * (cov + cov.T)

    values, vectors, sweeps = jacobi_eigh(cov)
    order = np.argsort(-values, kind="stable")[:retain]
    values, vectors = values[order], vectors[:, order]
    for j in range(retain):
        if vectors[np.argmax(np.abs(vectors[:, j])), j] < 0:
            vectors[:, j] = -vectors[:, j]

    logger.info(f"PCA fit on {len(pixels)} pixels: {bands} -> {retain} bands in {sweeps} Jacobi sweeps")
    # held at checkpoint (float32) precision so a restored model projects identically
    as_stored = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    return PcaModel(mean=as_stored(mean), components=as_stored(vectors), eigenvalues=as_stored(values),
                    total_variance=float(np.float32(np.trace(cov))))


def pca_apply(cube, model):
    """Project every pixel onto the retained components."""
    if cube.bands != model.input_bands:
        raise DimensionError(f"cube has {cube.bands} bands, PCA model expects {model.input_bands}")
    flat = cube.data.reshape(-1, cube.bands).astype(np.float64)
    reduced = (flat - model.mean) @ model.components
    return HsiCube(reduced.reshape(cube.height, cube.width, model.output_bands).astype(np.float32))


def pca_inverse(cube, model):
    """Back-project a reduced cube into the original band space."""
    if cube.bands != model.output_bands:
        raise DimensionError(f"cube has {cube.bands} bands, PCA model produces {model.output_bands}")
    flat = cube.data.reshape(-1, cube.bands).astype(np.float64)
    restored = flat @ model.components.T + model.mean
    return HsiCube(restored.reshape(cube.height, cube.width, model.input_bands).astype(np.float32))


# ---------------------------------------------------------------- patches

@dataclass
class PatchSet:
    """N patches of S×S×B centred on labeled pixels."""
    patches: np.ndarray
    labels: np.ndarray
    coords: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, index):
        return PatchSet(self.patches[index], self.labels[index], self.coords[index])


def _check_patch_size(size):
    if size < 3 or size % 2 == 0:
        raise ConfigurationError(f"patch size must be odd and ≥ 3, got {size}")


def extract_coords(cube, coords, size):
    """Zero-padded S×S×B patches centred on each (y, x) in ``coords``."""
    _check_patch_size(size)
    pad = size // 2
    padded = np.pad(cube.data, ((pad, pad), (pad, pad), (0, 0)))
    # windows: (H, W, B, S, S)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(0, 1))
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    return np.ascontiguousarray(windows[coords[:, 0], coords[:, 1]].transpose(0, 2, 3, 1))


def extract_patches(cube, labels, size):
    """One patch per labeled pixel, in row-major scan order."""
    _check_patch_size(size)
    if labels.labels.shape != (cube.height, cube.width):
        raise DimensionError(f"label map {labels.labels.shape} does not match cube {cube.height}x{cube.width}")
    coords = np.argwhere(labels.labels > 0)
    patches = extract_coords(cube, coords, size)
    ids = labels.labels[coords[:, 0], coords[:, 1]].astype(np.int64)
    logger.info(f"Extracted {len(ids)} patches of {size}x{size}x{cube.bands}")
    return PatchSet(patches=patches, labels=ids, coords=coords)


def iter_coord_batches(height, width, batch_size, mask=None):
    """Row-major pixel coordinates in batches; restricted to ``mask`` when given."""
    if mask is None:
        ys, xs = np.divmod(np.arange(height * width), width)
        coords = np.stack([ys, xs], axis=1)
    else:
        coords = np.argwhere(mask)
    for start in range(0, len(coords), batch_size):
        yield coords[start:start + batch_size]


# ---------------------------------------------------------------- splitting

@dataclass
class SplitSpec:
    seed: int = 0
    val_fraction: float = 0.3
    train_fraction: float = 0.5
    assignment: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigurationError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")


def _round_half_up(value):
    return int(math.floor(value + 0.5))


def assign_split(patch_set, spec, train_mask=None):
    """Tag every sample train, val or test.

    With a train mask, masked pixels form the training pool and every other
    labeled pixel is test. Without one, ``spec.train_fraction`` of each class
    forms the pool. ``spec.val_fraction`` of the pool, stratified per class,
    becomes validation.
    """
    rng = np.random.default_rng(spec.seed)
    tags = np.full(len(patch_set), TEST, dtype=object)

    if train_mask is not None:
        in_mask = train_mask.labels[patch_set.coords[:, 0], patch_set.coords[:, 1]] > 0
        pool = np.flatnonzero(in_mask)
    else:
        pool = []
        for cls in np.unique(patch_set.labels):
            members = rng.permutation(np.flatnonzero(patch_set.labels == cls))
            take = len(members) if spec.train_fraction >= 1.0 else max(1, _round_half_up(len(members) * spec.train_fraction))
            pool.extend(members[:take])
        pool = np.array(sorted(pool), dtype=np.int64)

    tags[pool] = TRAIN
    pool_labels = patch_set.labels[pool]
    for cls in np.unique(pool_labels):
        members = pool[pool_labels == cls]
        if len(members) < 2:
            logger.warning(f"Class {cls} has {len(members)} training sample(s); keeping it entirely in train")
            continue
        n_val = min(max(_round_half_up(len(members) * spec.val_fraction), 1), len(members) - 1)
        tags[rng.permutation(members)[:n_val]] = VAL
    return tags


def split(patch_set, spec, train_mask=None):
    """Partition samples into (train, val, test) PatchSets; deterministic for a fixed seed."""
    tags = assign_split(patch_set, spec, train_mask)
    spec.assignment = tags
    parts = tuple(patch_set.subset(np.flatnonzero(tags == tag)) for tag in (TRAIN, VAL, TEST))
    logger.info(f"Split {len(patch_set)} samples: train={len(parts[0])} val={len(parts[1])} test={len(parts[2])}")
    return parts
