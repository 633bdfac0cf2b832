"""Finite-difference verification of analytic gradients."""
import numpy as np

from exceptions import ConfigurationError, NumericError
from tensor_engine import ops
from tensor_engine.tensor import Tape, Tensor, no_grad
from utils import setup_logging

logger = setup_logging()


def _as_named(inputs):
    if isinstance(inputs, Tensor):
        return {"x": inputs}, True
    return dict(inputs), False


def gradcheck(f, inputs, samples=25, step=1e-3, seed=0):
    """Compare backward() against central differences in 64-bit.

    The scalar checked is Σ f(inputs) ⊙ R for a fixed random cotangent R, so
    non-scalar functions are checked in every output direction at once.

    Args:
        f: Function of a Tensor (or of a name->Tensor mapping) returning a Tensor
        inputs (Tensor | dict): Point of evaluation; values are copied to float64
        samples (int): Number of randomly sampled input coordinates
        step (float): Central-difference step
        seed (int): Seed for coordinate sampling and the cotangent

    Returns:
        float: max over sampled coordinates of |a - n| / (|a| + |n| + 1e-8)
    """
    if samples < 1:
        raise ConfigurationError(f"gradcheck needs at least one sample, got {samples}")
    rng = np.random.default_rng(seed)
    named, single = _as_named(inputs)
    leaves = {name: Tensor(t.data.astype(np.float64), requires_grad=True, name=name) for name, t in named.items()}

    def call():
        return f(leaves["x"] if single else leaves)

    with no_grad():
        probe = call()
    cotangent = rng.standard_normal(probe.shape)

    with Tape():
        out = call()
        loss = ops.sum_all(ops.mul(out, Tensor(cotangent, dtype=np.float64)))
        loss.backward()

    def evaluate():
        with no_grad():
            return call().data.astype(np.float64)

    names = list(leaves)
    sizes = np.array([leaves[n].size for n in names])
    flat = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for position in np.sort(flat):
        which = int(np.searchsorted(bounds, position, side="right"))
        name = names[which]
        index = int(position - (bounds[which - 1] if which else 0))
        leaf = leaves[name]
        coord = np.unravel_index(index, leaf.shape)

        original = leaf.data[coord]
        leaf.data[coord] = original + step
        plus = evaluate()
        leaf.data[coord] = original - step
        minus = evaluate()
        leaf.data[coord] = original

        numeric = float(np.sum((plus - minus) * cotangent)) / (2.0 * step)
        analytic = 0.0 if leaf.grad is None else float(leaf.grad[coord])
        if not (np.isfinite(numeric) and np.isfinite(analytic)):
            raise NumericError(f"gradcheck: non-finite gradient at {name}{tuple(int(c) for c in coord)}")
        error = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-8)
        if error > worst:
            worst = error
            logger.debug(f"gradcheck worst so far {error:.3e} at {name}{coord}: analytic={analytic:.6e} numeric={numeric:.6e}")

    return worst
