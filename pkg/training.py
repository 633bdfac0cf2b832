"""Cross-entropy optimisation with Adam, plateau LR scheduling and best-validation checkpointing."""
import copy
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

import tensor_engine as te
from exceptions import ConfigurationError, ContractError, DataError, NumericError
from hsi_io import CheckpointMeta, save_checkpoint
from model import forward, init_params, predict_patches
from tensor_engine.tensor import make_result
from utils import close_run_logging, log_epoch, setup_logging, setup_run_logging

logger = setup_logging()

CHECKPOINT_NAME = "best.ckpt"


# ---------------------------------------------------------------- loss

def cross_entropy(logits, labels):
    """Mean negative log-likelihood of 1-based ``labels`` under softmax(logits).

    Computed in float64 with max subtraction; the backward rule is the fused
    (softmax - onehot) / N.
    """
    logits = te.Tensor(logits) if not isinstance(logits, te.Tensor) else logits
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 1) | (labels > k))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {labels[i]} of sample {i} is outside 1..{k}", index=i)

    rows = np.arange(n)
    targets = labels - 1
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    loss = -log_probs[rows, targets].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return ((grad * (float(g) / n)).astype(logits.dtype),)

    return make_result(np.array(loss, dtype=logits.dtype), (logits,), backward, name="cross_entropy")


# ---------------------------------------------------------------- Adam

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params, lr=1e-3):
        return cls(
            m={name: np.zeros(p.shape) for name, p in params.items()},
            v={name: np.zeros(p.shape) for name, p in params.items()},
            lr=lr,
        )

    def to_params(self):
        """Moments under adam.m.* / adam.v.* plus the step count, for checkpoints."""
        out = {f"adam.m.{name}": m for name, m in self.m.items()}
        out.update({f"adam.v.{name}": v for name, v in self.v.items()})
        out["adam.t"] = np.array([self.t], dtype=np.float64)
        return out

    @classmethod
    def from_params(cls, loaded, lr):
        m = {k[len("adam.m."):]: np.asarray(a, dtype=np.float64) for k, a in loaded.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: np.asarray(a, dtype=np.float64) for k, a in loaded.items() if k.startswith("adam.v.")}
        t = int(loaded["adam.t"][0]) if "adam.t" in loaded else 0
        return cls(m=m, v=v, t=t, lr=lr)


def adam_step(params, state, grads=None):
    """One bias-corrected Adam update in place.

    Args:
        params (dict): name -> Tensor
        state (OptimizerState): Moments, step count and lr; ``t`` advances by one
        grads (dict, optional): name -> array; defaults to each tensor's ``grad``
            (missing grads count as zero)
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    resolved = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for '{name}', optimizer step aborted")
        resolved[name] = g

    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = resolved[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = state.beta1 * (np.zeros(p.shape) if m is None else m) + (1.0 - state.beta1) * g
        v = state.beta2 * (np.zeros(p.shape) if v is None else v) + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------- schedule

@dataclass
class TrainSchedule:
    max_epochs: int = 100
    batch_size: int = 32
    initial_lr: float = 1e-3
    plateau_patience: int = 10
    lr_factor: float = 0.5
    min_lr: float = 1e-5
    seed: int = 0
    save_optimizer_state: bool = False

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1 or self.plateau_patience < 1:
            raise ConfigurationError("max_epochs, batch_size and plateau_patience must be positive")
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigurationError(f"lr_factor must lie in (0, 1), got {self.lr_factor}")
        if not 0.0 < self.min_lr <= self.initial_lr:
            raise ConfigurationError(f"need 0 < min_lr ≤ initial_lr, got {self.min_lr} and {self.initial_lr}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown train config key '{unknown[0]}'")
        return cls(**raw)


@dataclass
class PlateauScheduler:
    """Halve the lr after ``patience`` epochs without strict improvement, floored at ``min_lr``."""
    lr: float = 1e-3
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-5
    best: float = float("-inf")
    wait: int = 0

    @classmethod
    def from_schedule(cls, schedule):
        return cls(lr=schedule.initial_lr, factor=schedule.lr_factor,
                   patience=schedule.plateau_patience, min_lr=schedule.min_lr)

    def update(self, value):
        # the first epoch has nothing to beat, so it opens the plateau window
        first = self.best == float("-inf")
        if value > self.best:
            self.best = value
            if not first:
                self.wait = 0
                return self.lr
        self.wait += 1
        if self.wait >= self.patience:
            reduced = max(self.lr * self.factor, self.min_lr)
            if reduced < self.lr:
                logger.info(f"Validation OA plateaued for {self.wait} epochs, lr {self.lr:.3e} -> {reduced:.3e}")
            self.lr = reduced
            self.wait = 0
        return self.lr


def scheduler_update(history, state):
    """Feed the newest validation accuracy of ``history`` to ``state``; returns the new lr."""
    if not history:
        raise ContractError("scheduler_update needs a non-empty accuracy history")
    return state.update(history[-1])


# ---------------------------------------------------------------- checkpointing

class BestCheckpoint:
    """Parameter snapshot replaced only on strict validation-OA improvement."""

    def __init__(self):
        self.epoch = 0
        self.val_oa = float("-inf")
        self.params = None
        self.optimizer = None

    def offer(self, epoch, val_oa, params, optimizer=None):
        if val_oa <= self.val_oa:
            return False
        self.epoch = epoch
        self.val_oa = val_oa
        self.params = {name: t.data.copy() for name, t in params.items()}
        self.optimizer = copy.deepcopy(optimizer) if optimizer is not None else None
        return True

    def save(self, path, extra=None):
        arrays = dict(self.params)
        if self.optimizer is not None:
            arrays.update(self.optimizer.to_params())
        if extra:
            arrays.update(extra)
        meta = CheckpointMeta(epoch=self.epoch, val_oa=self.val_oa,
                              has_optimizer_state=self.optimizer is not None)
        save_checkpoint(arrays, meta, path)


@dataclass
class TrainResult:
    params: dict
    best_epoch: int
    best_val_oa: float
    history: list
    final_lr: float
    checkpoint: BestCheckpoint = None


def overall_accuracy(preds, labels):
    return float(np.mean(np.asarray(preds) == np.asarray(labels))) if len(labels) else 0.0


def train(config, train_set, val_set, schedule, params=None, output_dir=None, run_id="main", extra_arrays=None,
          optimizer_state=None):
    """Train from ``params`` (fresh Glorot init when None) and return the best-validation snapshot.

    Args:
        config (ModelConfig): Architecture
        train_set (PatchSet): Shuffled each epoch with seed + epoch
        val_set (PatchSet): Scored in eval mode after every epoch
        schedule (TrainSchedule): Epochs, batch size and lr policy
        output_dir (str, optional): Receives training_log.jsonl and best.ckpt
        extra_arrays (dict, optional): Arrays saved alongside the parameters (e.g. pca.*)
        optimizer_state (OptimizerState, optional): Adam moments to continue from; its lr is
            reset to the schedule's initial lr

    Returns:
        TrainResult: Parameters of the best epoch, never the last
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError(f"train and val must be non-empty, got {len(train_set)} and {len(val_set)}")
    if params is None:
        params = init_params(config, schedule.seed)

    if optimizer_state is None:
        state = OptimizerState.create(params, schedule.initial_lr)
    else:
        state = optimizer_state
        state.lr = schedule.initial_lr
    scheduler = PlateauScheduler.from_schedule(schedule)
    best = BestCheckpoint()
    history = []
    run_logger = setup_run_logging(output_dir, run_id) if output_dir else None
    n = len(train_set)
    logger.info(f"Training on {n} samples, validating on {len(val_set)}, up to {schedule.max_epochs} epochs")

    try:
        for epoch in range(1, schedule.max_epochs + 1):
            order = np.random.default_rng(schedule.seed + epoch).permutation(n)
            dropout_rng = np.random.default_rng([schedule.seed, epoch])
            loss_sum = 0.0
            for batch, start in enumerate(range(0, n, schedule.batch_size)):
                idx = order[start:start + schedule.batch_size]
                for p in params.values():
                    p.zero_grad()
                with te.Tape() as tape:
                    logits = forward(train_set.patches[idx], params, config, mode="train", rng=dropout_rng)
                    loss = cross_entropy(logits, train_set.labels[idx])
                    value = float(loss.item())
                    if not np.isfinite(value):
                        raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch}")
                    loss.backward()
                    tape.clear()
                adam_step(params, state)
                loss_sum += value * len(idx)
                logger.debug(f"epoch {epoch} batch {batch} loss {value:.6f}")

            val_oa = overall_accuracy(predict_patches(val_set.patches, params, config), val_set.labels)
            if best.offer(epoch, val_oa, params, state if schedule.save_optimizer_state else None):
                if output_dir:
                    best.save(os.path.join(output_dir, CHECKPOINT_NAME), extra_arrays)
            state.lr = scheduler.update(val_oa)
            record = {"epoch": epoch, "train_loss": loss_sum / n, "val_oa": val_oa, "lr": state.lr}
            history.append(record)
            log_epoch(record, run_logger)
            logger.info(f"epoch {epoch}: loss {record['train_loss']:.4f} val OA {val_oa:.4f} lr {state.lr:.2e}")
    finally:
        if run_logger is not None:
            close_run_logging(run_logger)

    best_params = {name: te.Tensor(best.params[name], requires_grad=True, name=name) for name in params}
    logger.info(f"Best validation OA {best.val_oa:.4f} at epoch {best.epoch}")
    return TrainResult(params=best_params, best_epoch=best.epoch, best_val_oa=best.val_oa,
                       history=history, final_lr=state.lr, checkpoint=best)


# ---------------------------------------------------------------- repeated runs

@dataclass
class RunStats:
    """Per-seed OA/AA/κ and their mean and sample standard deviation."""
    runs: list
    mean: dict
    std: dict
    std_defined: bool

    def to_dict(self):
        return asdict(self)


def summarize_runs(runs):
    if not runs:
        raise ConfigurationError("need at least one run to summarise")
    keys = ("oa", "aa", "kappa")
    values = {k: np.array([r[k] for r in runs], dtype=np.float64) for k in keys}
    defined = len(runs) > 1
    mean = {k: float(values[k].mean()) for k in keys}
    std = {k: float(values[k].std(ddof=1)) if defined else 0.0 for k in keys}
    if not defined:
        logger.warning("Single run: standard deviation is undefined, reported as 0")
    return RunStats(runs=list(runs), mean=mean, std=std, std_defined=defined)


def multi_run(config, splits, schedule, seeds, workers=1, output_dir=None, class_names=None):
    """Train one model per seed and summarise test OA/AA/κ.

    Runs are independent (own parameters, optimizer and tape) and may execute
    on ``workers`` threads; results are ordered by seed position.
    """
    from metrics import evaluate_patches

    seeds = list(seeds)
    if not seeds:
        raise ConfigurationError("multi_run needs at least one seed")
    train_set, val_set, test_set = splits

    def one(seed):
        run_dir = os.path.join(output_dir, f"seed_{seed}") if output_dir else None
        result = train(config, train_set, val_set, replace(schedule, seed=seed),
                       output_dir=run_dir, run_id=f"seed_{seed}")
        report = evaluate_patches(result.params, config, test_set, class_names=class_names)
        return {"seed": seed, "oa": report.oa, "aa": report.aa, "kappa": report.kappa,
                "best_epoch": result.best_epoch, "best_val_oa": result.best_val_oa}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        runs = list(pool.map(one, seeds))
    stats = summarize_runs(runs)
    logger.info(f"{len(seeds)} runs: OA {stats.mean['oa']:.4f} ± {stats.std['oa']:.4f}")
    return stats
