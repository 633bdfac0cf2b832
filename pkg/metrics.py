"""Confusion-matrix metrics (OA, AA, κ), full-scene prediction and the ablation table."""
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.metrics import confusion_matrix

from exceptions import DataError, UndefinedMetricError
from hsi_io import LabelMap
from model import count_params, forward, predict_classes, predict_patches
from preprocess import extract_coords, iter_coord_batches
import tensor_engine as te
from utils import setup_logging

logger = setup_logging()

# (variant name, use_msfe, use_vit, use_mamba)
ABLATION_VARIANTS = (
    ("full", True, True, True),
    ("w/o MS_FE", False, True, True),
    ("w/o ViT", True, False, True),
    ("w/o Mamba", True, True, False),
)


@dataclass
class ConfusionMatrix:
    """K×K counts; rows are reference classes, columns predictions."""
    counts: np.ndarray

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def to_list(self):
        return self.counts.astype(int).tolist()


def _check_ids(ids, num_classes, what):
    bad = np.flatnonzero((ids < 1) | (ids > num_classes))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{what} id {ids[i]} at index {i} is outside 1..{num_classes}", index=i)


def confusion(preds, refs, num_classes):
    preds = np.asarray(preds, dtype=np.int64).ravel()
    refs = np.asarray(refs, dtype=np.int64).ravel()
    if preds.shape != refs.shape:
        raise DataError(f"{len(preds)} predictions for {len(refs)} references")
    _check_ids(refs, num_classes, "reference")
    _check_ids(preds, num_classes, "predicted")
    if refs.size == 0:
        return ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))
    counts = confusion_matrix(refs, preds, labels=np.arange(1, num_classes + 1))
    return ConfusionMatrix(counts.astype(np.int64))


def oa(cm):
    if cm.total == 0:
        raise UndefinedMetricError("overall accuracy is undefined for an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def empty_classes(cm):
    """1-based ids of classes with no reference samples."""
    return [int(i) + 1 for i in np.flatnonzero(cm.counts.sum(axis=1) == 0)]


def per_class_accuracy(cm):
    """Recall per class; ``None`` where the class has no reference samples."""
    rows = cm.counts.sum(axis=1)
    return [float(cm.counts[i, i]) / rows[i] if rows[i] else None for i in range(cm.num_classes)]


def aa(cm):
    """Mean per-class recall over classes that have reference samples."""
    recalls = [r for r in per_class_accuracy(cm) if r is not None]
    if not recalls:
        raise UndefinedMetricError("average accuracy is undefined: every class row is empty")
    skipped = empty_classes(cm)
    if skipped:
        logger.warning(f"Average accuracy excludes empty class rows {skipped}")
    return float(np.mean(recalls))


def kappa(cm):
    n = cm.total
    if n == 0:
        raise UndefinedMetricError("kappa is undefined for an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    p_o = np.trace(counts) / n
    p_e = float(np.sum(counts.sum(axis=1) * counts.sum(axis=0))) / (n * n)
    if p_e == 1.0:
        if p_o == 1.0:
            return 1.0
        raise UndefinedMetricError("kappa is undefined: chance agreement is 1 but observed agreement is not")
    return float((p_o - p_e) / (1.0 - p_e))


@dataclass
class EvalReport:
    oa: float
    aa: float
    kappa: float
    per_class: list
    confusion: list
    empty_classes: list = field(default_factory=list)
    class_names: list = None
    config: dict = None
    runtime: dict = None

    @classmethod
    def from_confusion(cls, cm, class_names=None, config=None, runtime=None):
        return cls(
            oa=oa(cm),
            aa=aa(cm),
            kappa=kappa(cm),
            per_class=per_class_accuracy(cm),
            confusion=cm.to_list(),
            empty_classes=empty_classes(cm),
            class_names=class_names,
            config=config,
            runtime=runtime,
        )

    def to_dict(self, include_runtime=True):
        out = asdict(self)
        if not include_runtime:
            out.pop("runtime")
        return out

    def to_json(self, include_runtime=True):
        return json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True)

    def per_class_table(self):
        """(class id, name, accuracy) rows for display."""
        names = self.class_names or [f"class {i + 1}" for i in range(len(self.per_class))]
        return [(i + 1, names[i], acc) for i, acc in enumerate(self.per_class)]


def evaluate_patches(params, config, patch_set, batch_size=256, class_names=None):
    """Eval-mode OA/AA/κ of ``params`` over a PatchSet."""
    start = time.perf_counter()
    preds = predict_patches(patch_set.patches, params, config, batch_size)
    elapsed = time.perf_counter() - start
    cm = confusion(preds, patch_set.labels, config.num_classes)
    return EvalReport.from_confusion(cm, class_names=class_names, runtime={"forward_s": elapsed})


def predict_scene(cube, params, config, batch_size=256, labels=None, labeled_only=False, class_names=None):
    """Classify every pixel (or only labeled pixels) of a PCA-reduced cube.

    Returns:
        tuple: (LabelMap of predictions, EvalReport or None, timing dict with
        extract_s, forward_s, total_s, pixels, pixels_per_s)
    """
    mask = None
    if labeled_only:
        if labels is None:
            raise DataError("labeled_only prediction needs a reference label map")
        mask = labels.labels > 0
    out = np.zeros((cube.height, cube.width), dtype=np.uint16)
    extract_s = forward_s = 0.0
    pixels = 0
    with te.no_grad():
        for coords in iter_coord_batches(cube.height, cube.width, batch_size, mask):
            t0 = time.perf_counter()
            patches = extract_coords(cube, coords, config.patch_size)
            t1 = time.perf_counter()
            preds = predict_classes(forward(patches, params, config, mode="eval"))
            forward_s += time.perf_counter() - t1
            extract_s += t1 - t0
            out[coords[:, 0], coords[:, 1]] = preds
            pixels += len(coords)

    total = extract_s + forward_s
    timing = {
        "extract_s": extract_s,
        "forward_s": forward_s,
        "total_s": total,
        "pixels": pixels,
        "pixels_per_s": pixels / total if total > 0 else 0.0,
    }
    logger.info(f"Predicted {pixels} pixels: extraction {extract_s:.2f}s, forward {forward_s:.2f}s")
    prediction = LabelMap(out, config.num_classes, class_names)

    report = None
    if labels is not None:
        ref_mask = labels.labels > 0
        cm = confusion(out[ref_mask], labels.labels[ref_mask], config.num_classes)
        report = EvalReport.from_confusion(cm, class_names=class_names, runtime=timing)
    return prediction, report, timing


def ablation_suite(base_config, splits, schedule, seeds, workers=1, output_dir=None):
    """Train and test each component variant under identical seeds and data.

    Returns:
        list: One dict per variant with toggles, parameter count and mean/std OA, AA, κ
    """
    from training import multi_run

    table = []
    for name, use_msfe, use_vit, use_mamba in ABLATION_VARIANTS:
        config = base_config.with_toggles(use_msfe, use_vit, use_mamba)
        run_dir = None
        if output_dir:
            run_dir = f"{output_dir}/ablation_{''.join(str(int(t)) for t in (use_msfe, use_vit, use_mamba))}"
        stats = multi_run(config, splits, schedule, seeds, workers=workers, output_dir=run_dir)
        table.append({
            "variant": name,
            "use_msfe": use_msfe,
            "use_vit": use_vit,
            "use_mamba": use_mamba,
            "toggles": "".join(str(int(t)) for t in (use_msfe, use_vit, use_mamba)),
            "params": count_params(config),
            "mean": stats.mean,
            "std": stats.std,
            "runs": stats.runs,
        })
        logger.info(f"Ablation {name}: OA {stats.mean['oa']:.4f}")
    return table
