import numpy as np
import pytest

from model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Small enough for float64 gradchecks of the whole model."""
    return ModelConfig(
        patch_size=5,
        input_bands=6,
        ms_filters=2,
        embed_dim=16,
        heads=2,
        encoder_layers=1,
        mlp_ratio=2,
        mamba_expand=2,
        mamba_kernel=3,
        head_hidden=8,
        num_classes=3,
        dropout=0.0,
    )


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch):
    """Keep CVM_* overrides of the developer's shell out of config resolution."""
    import os
    for name in list(os.environ):
        if name.startswith("CVM_"):
            monkeypatch.delenv(name)


TINY_RUN = {
    "data": {"patch_size": 5, "pca_bands": 4},
    "model": {"ms_filters": 2, "embed_dim": 16, "heads": 2, "encoder_layers": 1, "head_hidden": 8,
              "num_classes": 3, "dropout": 0.0},
    "train": {"max_epochs": 2, "batch_size": 8},
    "synthetic": {"height": 16, "width": 16, "bands": 8, "num_classes": 3, "labeled": 45,
                  "train_per_class": 6, "block": 4},
}


@pytest.fixture(scope="session")
def write_tiny_run():
    """Write a 16×16 synthetic-scene run config into a directory; returns the CLI flags."""
    import json

    def write(run_dir):
        run = json.loads(json.dumps(TINY_RUN))
        run["data"].update(cube=str(run_dir / "cube.hsi"), labels=str(run_dir / "labels.lbl"),
                           train_mask=str(run_dir / "train_mask.lbl"))
        path = run_dir / "run.json"
        path.write_text(json.dumps(run))
        return ["--config", str(path), "--out", str(run_dir)]

    return write
