"""Loaders for pipeline configuration files and scene data."""
import copy
import json
import os
import sys
from dataclasses import dataclass, fields
from datetime import datetime, timezone

from constants import DATASET_PRESETS, DEFAULT_OUTPUT_DIR, ENV_OVERRIDE_PREFIX, ENVIRONMENT
from exceptions import CheckpointError, ConfigurationError
from hsi_io import load_checkpoint, read_cube, read_labels, restore_params
from model import ModelConfig, init_params
from preprocess import PcaModel, SplitSpec
from training import CHECKPOINT_NAME, OptimizerState, TrainSchedule
from utils import setup_logging

logger = setup_logging()

RESOLVED_CONFIG_NAME = "resolved_config.json"
META_NAME = "meta.json"

# data.patch_size / data.pca_bands and the label map fix these model fields
_DERIVED_MODEL_KEYS = {"patch_size", "input_bands"}


def _defaults():
    model = {f.name: f.default for f in fields(ModelConfig) if f.name not in _DERIVED_MODEL_KEYS}
    model["num_classes"] = None
    train = {f.name: f.default for f in fields(TrainSchedule) if f.name != "seed"}
    return {
        "data": {
            "preset": None,
            "cube": None,
            "labels": None,
            "train_mask": None,
            "patch_size": 9,
            "pca_bands": 20,
            "pca_stride": 1,
            "val_fraction": 0.3,
            "train_fraction": 0.5,
            "class_names": None,
        },
        "model": model,
        "train": train,
        "eval": {
            "palette": None,
            "full_scene": False,
            "batch_size": 256,
        },
        "run": {
            "seeds": [0],
            "output_dir": DEFAULT_OUTPUT_DIR,
            "workers": 1,
            "patch_sizes": [5, 7, 9],
            "pca_counts": [10, 15, 20],
        },
        "synthetic": {
            "height": 32,
            "width": 32,
            "bands": 32,
            "num_classes": 4,
            "labeled": 200,
            "train_per_class": 10,
            "block": 8,
            "noise": 0.05,
        },
    }


@dataclass
class PipelineConfig:
    """Fully resolved configuration, one dict per section."""
    data: dict
    model: dict
    train: dict
    eval: dict
    run: dict
    synthetic: dict

    def to_dict(self):
        return {name: copy.deepcopy(getattr(self, name)) for name in SECTIONS}

    @property
    def seed(self):
        return int(self.run["seeds"][0])

    @property
    def output_dir(self):
        return self.run["output_dir"]

    def model_config(self, num_classes=None):
        raw = dict(self.model)
        raw["num_classes"] = num_classes if num_classes is not None else raw["num_classes"]
        if raw["num_classes"] is None:
            raise ConfigurationError("model.num_classes is unset and no label map supplies it")
        raw["patch_size"] = self.data["patch_size"]
        raw["input_bands"] = self.data["pca_bands"]
        return ModelConfig.from_dict(raw)

    def schedule(self, seed=None):
        return TrainSchedule.from_dict({**self.train, "seed": self.seed if seed is None else seed})

    def split_spec(self, seed=None):
        return SplitSpec(seed=self.seed if seed is None else seed,
                         val_fraction=self.data["val_fraction"],
                         train_fraction=self.data["train_fraction"])


SECTIONS = tuple(f.name for f in fields(PipelineConfig))


def _merge(target, updates, origin):
    for section, values in updates.items():
        if section not in target:
            raise ConfigurationError(f"unknown config section '{section}' in {origin}")
        if not isinstance(values, dict):
            raise ConfigurationError(f"config section '{section}' in {origin} must be an object")
        for key, value in values.items():
            if key not in target[section]:
                raise ConfigurationError(f"unknown config key '{section}.{key}' in {origin}")
            target[section][key] = value


def load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigurationError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e


def env_overrides(environ):
    """``CVM_<SECTION>_<KEY>`` variables as nested updates; values parsed as JSON when possible."""
    updates = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_OVERRIDE_PREFIX):
            continue
        section, _, key = name[len(ENV_OVERRIDE_PREFIX):].lower().partition("_")
        if not key:
            raise ConfigurationError(f"environment override {name} names no key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        updates.setdefault(section, {})[key] = value
    return updates


def resolve_config(path=None, seed=None, output_dir=None, workers=None, environ=None):
    """Defaults, then data.preset, then the JSON file, then CVM_* variables, then CLI flags."""
    environ = os.environ if environ is None else environ
    resolved = _defaults()
    file_values = load_json(path) if path else {}
    if not isinstance(file_values, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    env_values = env_overrides(environ)

    preset = env_values.get("data", {}).get("preset", file_values.get("data", {}).get("preset"))
    if preset is not None:
        if preset not in DATASET_PRESETS:
            raise ConfigurationError(f"unknown dataset preset '{preset}', known: {sorted(DATASET_PRESETS)}")
        facts = DATASET_PRESETS[preset]
        resolved["data"].update(
            preset=preset,
            patch_size=facts["patch_size"],
            pca_bands=facts["pca_bands"],
            class_names=list(facts["class_names"]),
        )
        resolved["model"]["num_classes"] = len(facts["class_names"])

    _merge(resolved, file_values, path or "defaults")
    _merge(resolved, env_values, "environment")
    if seed is not None:
        resolved["run"]["seeds"] = [int(seed)]
    if output_dir is not None:
        resolved["run"]["output_dir"] = output_dir
    if workers is not None:
        resolved["run"]["workers"] = int(workers)

    if not resolved["run"]["seeds"]:
        raise ConfigurationError("run.seeds must list at least one seed")
    return PipelineConfig(**resolved)


def echo_config(config, output_dir=None, command=None):
    """Write the resolved config (deterministic) and a separate timestamped meta file."""
    output_dir = output_dir or config.output_dir
    os.makedirs(output_dir, exist_ok=True)
    with open(os.path.join(output_dir, RESOLVED_CONFIG_NAME), "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    write_meta(output_dir, {"command": command, "argv": sys.argv[1:]})
    logger.info(f"Resolved config written to {output_dir}")


def write_meta(output_dir, values):
    """Merge ``values`` into meta.json, the only run file allowed to carry timestamps."""
    path = os.path.join(output_dir, META_NAME)
    meta = {}
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    meta.update(values)
    meta.setdefault("created_at", datetime.now(timezone.utc).isoformat())
    meta["updated_at"] = datetime.now(timezone.utc).isoformat()
    meta["environment"] = ENVIRONMENT
    with open(path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_scene(config):
    """Read the cube, label map and optional training mask named in the data section."""
    data = config.data
    if not data["cube"] or not data["labels"]:
        raise ConfigurationError("data.cube and data.labels must name input files")
    cube = read_cube(data["cube"])
    labels = read_labels(data["labels"])
    mask = read_labels(data["train_mask"]) if data["train_mask"] else None
    if labels.class_names is None and data["class_names"] is not None:
        if len(data["class_names"]) == labels.num_classes:
            labels.class_names = list(data["class_names"])
        else:
            logger.warning(f"Ignoring {len(data['class_names'])} configured class names for {labels.num_classes} classes")
    logger.info(f"Loaded scene {cube.height}x{cube.width}x{cube.bands} with {labels.labeled_count} labeled pixels")
    return cube, labels, mask


def load_trained(config, num_classes, checkpoint=None):
    """Model parameters and PCA restored from a run's best checkpoint."""
    path = checkpoint or os.path.join(config.output_dir, CHECKPOINT_NAME)
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint {path} not found")
    model_config = config.model_config(num_classes)
    loaded, meta = load_checkpoint(path)
    params = restore_params(init_params(model_config, seed=0), loaded)
    if "pca.components" not in loaded:
        raise CheckpointError(f"checkpoint {path} carries no PCA model", parameter="pca.components")
    return model_config, params, PcaModel.from_params(loaded), meta


def load_resume(config, num_classes, checkpoint=None):
    """Parameters and, when the checkpoint carries it, Adam state to continue training from.

    Returns:
        tuple: (name -> Tensor, OptimizerState or None, CheckpointMeta)
    """
    path = checkpoint or os.path.join(config.output_dir, CHECKPOINT_NAME)
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint {path} not found")
    model_config = config.model_config(num_classes)
    loaded, meta = load_checkpoint(path)
    params = restore_params(init_params(model_config, seed=0), loaded)
    state = None
    if meta.has_optimizer_state:
        state = OptimizerState.from_params(loaded, lr=config.schedule().initial_lr)
        missing = sorted(set(params) - set(state.m))
        if missing:
            raise CheckpointError(f"checkpoint {path} has no Adam moments for '{missing[0]}'", parameter=missing[0])
    logger.info(f"Resuming from {path} (epoch {meta.epoch}, val OA {meta.val_oa:.4f}, "
                f"optimizer state {'restored' if state else 'reset'})")
    return params, state, meta
