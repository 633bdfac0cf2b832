import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import tensor_engine as te
from exceptions import ConfigurationError, ContractError, DataError, NumericError
from hsi_io import load_checkpoint
from model import init_params
from preprocess import PatchSet
from training import (
    CHECKPOINT_NAME, BestCheckpoint, OptimizerState, PlateauScheduler, TrainSchedule, adam_step,
    cross_entropy, multi_run, scheduler_update, summarize_runs, train,
)


def patch_set(rng, n, num_classes=3, size=5, bands=6, separable=False):
    labels = np.arange(n) % num_classes + 1
    patches = rng.standard_normal((n, size, size, bands)).astype(np.float32)
    if separable:
        patches = 0.05 * patches + (labels[:, None, None, None] - 2.0).astype(np.float32)
    coords = np.stack([np.zeros(n, dtype=np.int64), np.arange(n)], axis=1)
    return PatchSet(patches=patches, labels=labels, coords=coords)


def test_uniform_logits_give_log_k():
    loss = cross_entropy(te.Tensor(np.zeros((2, 4))), [1, 4])
    assert loss.item() == pytest.approx(math.log(4), rel=1e-12)


def test_confident_correct_logit_has_tiny_loss():
    logits = np.zeros((1, 3))
    logits[0, 1] = 1000.0
    loss = cross_entropy(te.Tensor(logits), [2]).item()
    assert np.isfinite(loss) and loss < 1e-6


def test_cross_entropy_matches_naive_loops(rng):
    for _ in range(20):
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        logits = rng.standard_normal((n, k)) * 3.0
        labels = rng.integers(1, k + 1, size=n)
        total = 0.0
        for i in range(n):
            norm = math.log(sum(math.exp(z) for z in logits[i]))
            total += norm - logits[i, labels[i] - 1]
        assert cross_entropy(te.Tensor(logits), labels).item() == pytest.approx(total / n, rel=1e-10)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = te.Tensor(np.zeros((2, 2)), requires_grad=True)
    with te.Tape():
        loss = cross_entropy(logits, [1, 2])
        loss.backward()
    assert_allclose(logits.grad, [[-0.25, 0.25], [0.25, -0.25]])


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(DataError) as info:
        cross_entropy(te.Tensor(np.zeros((3, 2))), [1, 3, 2])
    assert info.value.index == 1
    with pytest.raises(DataError):
        cross_entropy(te.Tensor(np.zeros((1, 2))), [0])


def test_adam_first_step():
    params = {"w": te.Tensor(np.array([1.0, -2.0]))}
    state = OptimizerState.create(params, lr=1e-3)
    adam_step(params, state, {"w": np.array([0.5, -3.0])})
    assert state.t == 1
    assert_allclose(params["w"].data - np.array([1.0, -2.0]), [-1e-3, 1e-3], rtol=1e-6)


def test_adam_zero_gradient_is_a_no_op():
    start = np.array([0.3, -0.7], dtype=np.float32)
    params = {"w": te.Tensor(start.copy())}
    adam_step(params, OptimizerState.create(params), {"w": np.zeros(2)})
    assert params["w"].data.tobytes() == start.tobytes()


def test_adam_aborts_on_non_finite_gradient():
    params = {"a": te.Tensor(np.ones(2)), "b": te.Tensor(np.ones(2))}
    state = OptimizerState.create(params)
    with pytest.raises(NumericError, match="'b'"):
        adam_step(params, state, {"a": np.ones(2), "b": np.array([1.0, np.nan])})
    assert state.t == 0
    assert_array_equal(params["a"].data, np.ones(2))


def test_optimizer_state_round_trip():
    params = {"w": te.Tensor(np.ones(3))}
    state = OptimizerState.create(params)
    adam_step(params, state, {"w": np.full(3, 0.1)})
    back = OptimizerState.from_params(state.to_params(), lr=state.lr)
    assert back.t == 1
    assert_array_equal(back.m["w"], state.m["w"])


def test_flat_history_halves_lr_after_patience():
    scheduler = PlateauScheduler(lr=1e-3, patience=10)
    lrs = [scheduler.update(0.5) for _ in range(20)]
    assert lrs[:9] == [1e-3] * 9
    assert lrs[9] == pytest.approx(5e-4)
    assert lrs[19] == pytest.approx(2.5e-4)


def test_improvement_resets_wait():
    scheduler = PlateauScheduler(lr=1e-3, patience=2)
    for value in [0.5, 0.6, 0.6]:
        scheduler.update(value)
    assert scheduler.lr == 1e-3
    assert scheduler.update(0.6) == pytest.approx(5e-4)


def test_rising_accuracy_keeps_lr():
    scheduler = PlateauScheduler(lr=1e-3, patience=2)
    assert [scheduler.update(v) for v in [0.1, 0.2, 0.3, 0.4, 0.5]] == [1e-3] * 5


def test_lr_is_floored():
    scheduler = PlateauScheduler(lr=3e-5, patience=1, min_lr=1e-5)
    lrs = [scheduler.update(0.9)] + [scheduler.update(0.1) for _ in range(2)]
    assert lrs == pytest.approx([1.5e-5, 1e-5, 1e-5])


def test_scheduler_update_needs_history():
    state = PlateauScheduler()
    with pytest.raises(ContractError):
        scheduler_update([], state)
    assert scheduler_update([0.2, 0.4], state) == 1e-3
    assert state.best == 0.4


def test_best_checkpoint_keeps_strict_maximum():
    best = BestCheckpoint()
    params = {"w": te.Tensor(np.zeros(1))}
    for epoch, oa in enumerate([0.5, 0.9, 0.7, 0.9], start=1):
        params["w"].data = np.array([float(epoch)])
        best.offer(epoch, oa, params)
    assert best.epoch == 2
    assert best.val_oa == 0.9
    assert_array_equal(best.params["w"], [2.0])


@pytest.mark.parametrize("overrides", [
    {"max_epochs": 0},
    {"lr_factor": 1.0},
    {"min_lr": 1e-2},
])
def test_invalid_schedules(overrides):
    with pytest.raises(ConfigurationError):
        TrainSchedule(**overrides)


def test_training_is_deterministic(tiny_config, rng, tmp_path):
    train_set, val_set = patch_set(rng, 12), patch_set(rng, 6)
    schedule = TrainSchedule(max_epochs=2, batch_size=4, seed=7)
    first = train(tiny_config, train_set, val_set, schedule, output_dir=str(tmp_path / "a"))
    second = train(tiny_config, train_set, val_set, schedule, output_dir=str(tmp_path / "b"))

    assert first.history == second.history
    for name in first.params:
        assert first.params[name].data.tobytes() == second.params[name].data.tobytes()
    assert [r["epoch"] for r in first.history] == [1, 2]
    assert first.best_val_oa == max(r["val_oa"] for r in first.history)

    lines = (tmp_path / "a" / "training_log.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [1, 2]
    loaded, meta = load_checkpoint(tmp_path / "a" / CHECKPOINT_NAME)
    assert meta.epoch == first.best_epoch
    assert_array_equal(loaded["head.fc2.w"], first.params["head.fc2.w"].data)


def test_training_rejects_empty_validation(tiny_config, rng):
    empty = patch_set(rng, 3).subset(np.array([], dtype=np.int64))
    with pytest.raises(ContractError):
        train(tiny_config, patch_set(rng, 3), empty, TrainSchedule(max_epochs=1))


def test_non_finite_loss_aborts(tiny_config, rng):
    params = init_params(tiny_config)
    params["head.fc2.b"].data = np.array([np.inf, 0.0, 0.0], dtype=np.float32)
    with pytest.raises(NumericError, match="epoch 1, batch 0"):
        train(tiny_config, patch_set(rng, 3), patch_set(rng, 3), TrainSchedule(max_epochs=1), params=params)


def test_summarize_runs():
    runs = [{"oa": v, "aa": v, "kappa": v} for v in (0.8, 0.9, 1.0)]
    stats = summarize_runs(runs)
    assert stats.mean["oa"] == pytest.approx(0.9)
    assert stats.std["oa"] == pytest.approx(0.1)
    assert stats.std_defined


def test_single_run_has_zero_std():
    stats = summarize_runs([{"oa": 0.7, "aa": 0.6, "kappa": 0.5}])
    assert stats.std == {"oa": 0.0, "aa": 0.0, "kappa": 0.0}
    assert not stats.std_defined


def test_multi_run_repeats_identically(tiny_config, rng):
    splits = (patch_set(rng, 9), patch_set(rng, 6), patch_set(rng, 6))
    schedule = TrainSchedule(max_epochs=1, batch_size=3)
    first = multi_run(tiny_config, splits, schedule, seeds=[0, 1])
    second = multi_run(tiny_config, splits, schedule, seeds=[0, 1], workers=2)
    assert first == second
    assert [run["seed"] for run in first.runs] == [0, 1]
    assert first.std_defined
    with pytest.raises(ConfigurationError):
        multi_run(tiny_config, splits, schedule, seeds=[])


@pytest.mark.slow
def test_tiny_model_fits_separable_data(tiny_config, rng):
    data = patch_set(rng, 12, separable=True)
    schedule = TrainSchedule(max_epochs=60, batch_size=12, initial_lr=1e-2, min_lr=1e-4, plateau_patience=30)
    result = train(tiny_config, data, data, schedule)
    assert result.best_val_oa == 1.0
    assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]
