import json

import pytest

from cli import gradcheck_model, main
from hsi_io import load_checkpoint, read_labels
from loaders import load_resume, resolve_config
from model import ModelConfig


def last_json(text):
    return json.loads([line for line in text.splitlines() if line.startswith("{")][-1])


@pytest.fixture
def tiny_run(tmp_path, write_tiny_run):
    return write_tiny_run(tmp_path)


def test_params_on_houston_preset(tmp_path, capsys):
    config = tmp_path / "houston.json"
    config.write_text(json.dumps({"data": {"preset": "houston"}}))
    assert main(["params", "--config", str(config), "--out", str(tmp_path)]) == 0
    out = last_json(capsys.readouterr().out)
    assert out["params"] > 0 and out["flops"] > 2 * out["macs"]
    report = json.loads((tmp_path / "params_report.json").read_text())
    assert (report["patch_size"], report["input_bands"], report["num_classes"]) == (17, 25, 15)
    assert sum(stage["macs"] for stage in report["stages"].values()) == report["macs"]


def test_gradcheck_command(tiny_run, capsys):
    assert main(["gradcheck", *tiny_run, "--samples", "10"]) == 0
    out = last_json(capsys.readouterr().out)
    assert out["passed"] and out["max_rel_error"] < 1e-3


def test_gradcheck_model_helper():
    config = ModelConfig(patch_size=3, input_bands=2, ms_filters=1, embed_dim=4, heads=1, encoder_layers=1,
                         head_hidden=4, num_classes=2, dropout=0.0)
    assert gradcheck_model(config, samples=10) < 1e-3


def test_configuration_error_exit_code(tmp_path, capsys):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"train": {"epochs": 3}}))
    assert main(["params", "--config", str(config), "--out", str(tmp_path)]) == 2
    err = last_json(capsys.readouterr().err)
    assert err["error"] == "ConfigurationError"
    assert "train.epochs" in err["message"]


def test_missing_checkpoint_exit_code(tiny_run, capsys):
    assert main(["make-synthetic", *tiny_run]) == 0
    assert main(["evaluate", *tiny_run]) == 2
    assert last_json(capsys.readouterr().err)["error"] == "CheckpointError"


def test_synthetic_train_evaluate_predict(tiny_run, tmp_path, capsys):
    assert main(["make-synthetic", *tiny_run]) == 0
    made = last_json(capsys.readouterr().out)
    assert made["labeled"] == 45

    assert main(["preprocess", *tiny_run]) == 0
    summary = json.loads((tmp_path / "split_summary.json").read_text())
    assert summary["test"]["total"] == 27
    assert summary["train"]["total"] + summary["val"]["total"] == 18

    assert main(["train", *tiny_run]) == 0
    trained = last_json(capsys.readouterr().out)
    assert trained["best_epoch"] in (1, 2)
    report = json.loads((tmp_path / "eval_report.json").read_text())
    assert "runtime" not in report
    assert sum(sum(row) for row in report["confusion"]) == 27
    params, meta = load_checkpoint(tmp_path / "best.ckpt")
    assert "pca.components" in params and meta.epoch == trained["best_epoch"]
    assert len((tmp_path / "training_log.jsonl").read_text().splitlines()) == 2

    assert main(["evaluate", *tiny_run, "--subset", "test"]) == 0
    evaluated = last_json(capsys.readouterr().out)
    assert evaluated["samples"] == 27
    assert evaluated["oa"] == pytest.approx(report["oa"])

    assert main(["predict-map", *tiny_run]) == 0
    assert (tmp_path / "prediction_map.ppm").read_bytes().startswith(b"P6\n16 16\n255\n")
    prediction = read_labels(tmp_path / "prediction.lbl")
    assert prediction.labeled_count == 45
    meta_file = json.loads((tmp_path / "meta.json").read_text())
    assert meta_file["predict_timing"]["pixels"] == 45


def test_missing_cube_exit_code(tiny_run, capsys):
    assert main(["pca-fit", *tiny_run]) == 2
    err = last_json(capsys.readouterr().err)
    assert err["error"] == "ConfigurationError"
    assert "cube.hsi" in err["message"]


def test_pca_fit_command(tiny_run, tmp_path, capsys):
    assert main(["make-synthetic", *tiny_run]) == 0
    assert main(["pca-fit", *tiny_run]) == 0
    out = last_json(capsys.readouterr().out)
    assert out["output_bands"] == 4
    report = json.loads((tmp_path / "pca_report.json").read_text())
    assert report["input_bands"] == 8
    cumulative = report["cumulative_explained_variance"]
    assert all(a <= b for a, b in zip(cumulative, cumulative[1:]))
    assert cumulative[-1] <= 1.0 + 1e-6
    params, meta = load_checkpoint(tmp_path / "pca.ckpt")
    assert params["pca.components"].shape == (8, 4) and meta.extra["kind"] == "pca"


def test_training_twice_gives_identical_checkpoints(tmp_path, write_tiny_run):
    checkpoints = []
    for name in ("a", "b"):
        run_dir = tmp_path / name
        run_dir.mkdir()
        args = write_tiny_run(run_dir)
        assert main(["make-synthetic", *args]) == 0
        assert main(["train", *args]) == 0
        checkpoints.append(load_checkpoint(run_dir / "best.ckpt"))
    (first, first_meta), (second, second_meta) = checkpoints
    assert first_meta == second_meta
    assert list(first) == list(second)
    for name in first:
        assert first[name].tobytes() == second[name].tobytes()


def test_train_resumes_with_saved_adam_state(tmp_path, write_tiny_run):
    args = write_tiny_run(tmp_path)
    path = tmp_path / "run.json"
    run = json.loads(path.read_text())
    run["train"]["save_optimizer_state"] = True
    path.write_text(json.dumps(run))
    assert main(["make-synthetic", *args]) == 0
    assert main(["train", *args]) == 0
    saved, meta = load_checkpoint(tmp_path / "best.ckpt")
    assert meta.has_optimizer_state and saved["adam.t"][0] > 0

    params, state, resumed = load_resume(resolve_config(str(path), output_dir=str(tmp_path)), 3)
    assert resumed.epoch == meta.epoch
    assert state.t == int(saved["adam.t"][0])
    assert params["head.fc2.w"].data.tobytes() == saved["head.fc2.w"].tobytes()
    assert main(["train", *args, "--resume"]) == 0


@pytest.fixture
def study_run(tmp_path, write_tiny_run):
    args = write_tiny_run(tmp_path)
    path = tmp_path / "run.json"
    run = json.loads(path.read_text())
    run["train"]["max_epochs"] = 1
    run["synthetic"]["bands"] = 12
    run["run"] = {"patch_sizes": [5], "pca_counts": [10]}
    path.write_text(json.dumps(run))
    assert main(["make-synthetic", *args]) == 0
    return args


def test_study_commands(study_run, tmp_path, capsys):
    capsys.readouterr()
    assert main(["ablate", *study_run]) == 0
    rows = last_json(capsys.readouterr().out)["rows"]
    assert [row["toggles"] for row in rows] == ["111", "011", "101", "110"]
    assert json.loads((tmp_path / "ablation.json").read_text())[0]["variant"] == "full"

    assert main(["multi-run", *study_run, "--runs", "2"]) == 0
    out = last_json(capsys.readouterr().out)
    assert out["runs"] == 2 and out["std_defined"]
    stats = json.loads((tmp_path / "multi_run.json").read_text())
    assert [run["seed"] for run in stats["runs"]] == [0, 1]

    assert main(["sweep", *study_run]) == 0
    out = last_json(capsys.readouterr().out)
    assert out["cells"] == 1
    assert (out["best"]["patch_size"], out["best"]["pca_bands"]) == (5, 10)


def test_sweep_rejects_values_off_the_grid(study_run, tmp_path, capsys):
    path = tmp_path / "run.json"
    run = json.loads(path.read_text())
    run["run"]["pca_counts"] = [12]
    path.write_text(json.dumps(run))
    assert main(["sweep", *study_run]) == 2
    assert last_json(capsys.readouterr().err)["error"] == "ConfigurationError"


@pytest.mark.slow
def test_default_model_learns_synthetic_scene(tmp_path, capsys):
    run = {
        "data": {"cube": str(tmp_path / "cube.hsi"), "labels": str(tmp_path / "labels.lbl"),
                 "train_mask": str(tmp_path / "train_mask.lbl"), "patch_size": 7, "pca_bands": 8},
        "train": {"max_epochs": 200},
        "synthetic": {"num_classes": 4, "labeled": 200, "train_per_class": 10},
    }
    config = tmp_path / "smoke.json"
    config.write_text(json.dumps(run))
    args = ["--config", str(config), "--out", str(tmp_path)]

    assert main(["make-synthetic", *args]) == 0
    assert main(["train", *args]) == 0
    assert last_json(capsys.readouterr().out)["test_oa"] >= 0.9
    assert main(["evaluate", *args, "--subset", "train"]) == 0
    assert last_json(capsys.readouterr().out)["oa"] == 1.0
