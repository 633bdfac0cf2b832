"""Differentiable primitives over ``Tensor``.

Convolutions are cross-correlations (no kernel flip). Binary elementwise
operations accept equal shapes or a bias-style second operand whose shape is
a trailing suffix of the first; any other broadcast is a DimensionError.
"""
import itertools
import math

import numpy as np

from exceptions import ConfigurationError, DimensionError
from tensor_engine.tensor import Tensor, as_tensor, make_result

GELU_COEFF = math.sqrt(2.0 / math.pi)


def _bias_axes(big_shape, small_shape, op_name):
    """Leading axes to reduce when ``small_shape`` is broadcast onto ``big_shape``."""
    if big_shape == small_shape:
        return ()
    lead = len(big_shape) - len(small_shape)
    if lead < 0 or tuple(big_shape[lead:]) != tuple(small_shape):
        raise DimensionError(f"{op_name}: shapes {tuple(big_shape)} and {tuple(small_shape)} are not compatible")
    return tuple(range(lead))


def _reduce(grad, axes):
    return grad.sum(axis=axes) if axes else grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    axes = _bias_axes(a.shape, b.shape, "add")

    def backward(g):
        return g, _reduce(g, axes)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    axes = _bias_axes(a.shape, b.shape, "sub")

    def backward(g):
        return g, -_reduce(g, axes)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    axes = _bias_axes(a.shape, b.shape, "mul")

    def backward(g):
        return g * b.data, _reduce(g * a.data, axes)

    return make_result(a.data * b.data, (a, b), backward)


def scale(x, factor):
    """Multiply by a Python scalar constant."""
    x = as_tensor(x)
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return make_result(x.data * x.dtype.type(factor), (x,), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    # tanh form avoids overflow for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_result(y.astype(x.dtype), (x,), backward)


def gelu(x):
    """GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    x = as_tensor(x)
    v = x.data
    t = np.tanh(GELU_COEFF * (v + 0.044715 * v ** 3))

    def backward(g):
        dt = (1.0 - t * t) * GELU_COEFF * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return make_result((0.5 * v * (1.0 + t)).astype(x.dtype), (x,), backward)


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "relu": relu,
}


def elementwise(op, *operands):
    """Dispatch a pointwise operation by name (add|sub|mul|gelu|sigmoid|relu)."""
    if op not in ELEMENTWISE:
        raise ConfigurationError(f"unknown elementwise op '{op}'")
    return ELEMENTWISE[op](*operands)


# ---------------------------------------------------------------- contractions

def matmul(a, b):
    """(..., M, K) × (K, N) -> (..., M, N)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward)


def bmm(a, b):
    """Batched product with identical leading axes: (..., M, K) × (..., K, N)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: shapes {a.shape} and {b.shape} are not aligned")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------- shape plumbing

def reshape(x, shape):
    x = as_tensor(x)
    original = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {original} as {tuple(shape)}") from e

    def backward(g):
        return (g.reshape(original),)

    return make_result(data, (x,), backward)


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def slice_last(x, start, stop):
    """x[..., start:stop]."""
    x = as_tensor(x)
    width = x.shape[-1]
    if not 0 <= start < stop <= width:
        raise DimensionError(f"slice_last: [{start}:{stop}] outside last extent {width}")

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[..., start:stop]), (x,), backward)


def split_last(x, sizes):
    """Split the last axis into consecutive chunks of the given sizes."""
    out, start = [], 0
    for size in sizes:
        out.append(slice_last(x, start, start + size))
        start += size
    return out


# ---------------------------------------------------------------- reductions

def sum_all(x):
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype), (x,), backward)


def mean(x, axis):
    x = as_tensor(x)
    axis = axis % x.ndim
    count = x.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / count, x.shape).astype(x.dtype),)

    return make_result(x.data.mean(axis=axis), (x,), backward)


# ---------------------------------------------------------------- normalisation

def layernorm(x, gamma, beta, eps=1e-5):
    """Standardise over the last axis then apply ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result((xhat * gamma.data + beta.data).astype(x.dtype), (x, gamma, beta), backward)


def softmax_lastaxis(x):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), backward)


def dropout(x, p, rng, training):
    """Inverted dropout; the identity outside training or when ``p`` is 0."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def backward(g):
        return (g * keep,)

    return make_result(x.data * keep, (x,), backward)


# ---------------------------------------------------------------- convolutions

def _same_pads(k):
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def conv3d(x, w, b, padding="same"):
    """3D cross-correlation.

    Args:
        x (Tensor): (N, D1, D2, D3, Cin)
        w (Tensor): (k1, k2, k3, Cin, Cout)
        b (Tensor): (Cout,)
        padding (str): "same" keeps D1..D3 through zero padding, "valid" pads nothing

    Returns:
        Tensor: (N, O1, O2, O3, Cout)
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 5 or w.ndim != 5 or x.shape[4] != w.shape[3] or b.shape != (w.shape[4],):
        raise DimensionError(f"conv3d: input {x.shape}, kernel {w.shape}, bias {b.shape} are not compatible")
    if padding not in ("same", "valid"):
        raise ConfigurationError(f"conv3d: unknown padding '{padding}'")
    kernel = w.shape[:3]
    pads = [_same_pads(k) if padding == "same" else (0, 0) for k in kernel]
    padded = [x.shape[i + 1] + sum(pads[i]) for i in range(3)]
    if any(k > p for k, p in zip(kernel, padded)):
        raise DimensionError(f"conv3d: kernel {kernel} larger than padded input {tuple(padded)}")
    out_dims = tuple(p - k + 1 for p, k in zip(padded, kernel))
    xp = np.pad(x.data, ((0, 0), *pads, (0, 0)))
    o1, o2, o3 = out_dims
    offsets = list(itertools.product(*(range(k) for k in kernel)))

    def window(i, j, k):
        return xp[:, i:i + o1, j:j + o2, k:k + o3, :]

    # accumulate one kernel offset at a time; no (..., Cin, k1, k2, k3) window copy
    out = np.zeros((x.shape[0], *out_dims, w.shape[4]), dtype=np.result_type(xp, w.data))
    for i, j, k in offsets:
        out += window(i, j, k) @ w.data[i, j, k]
    out += b.data

    def backward(g):
        gw = np.zeros(w.shape, dtype=np.result_type(xp, g))
        gxp = np.zeros_like(xp)
        for i, j, k in offsets:
            gw[i, j, k] = np.tensordot(window(i, j, k), g, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
            gxp[:, i:i + o1, j:j + o2, k:k + o3, :] += g @ w.data[i, j, k].T
        gx = gxp[:,
                 pads[0][0]:pads[0][0] + x.shape[1],
                 pads[1][0]:pads[1][0] + x.shape[2],
                 pads[2][0]:pads[2][0] + x.shape[3], :]
        return gx, gw, g.sum(axis=(0, 1, 2, 3))

    return make_result(out.astype(x.dtype, copy=False), (x, w, b), backward)


def conv1d_tokens(x, w, b):
    """Depthwise token convolution with centred zero "same" padding.

    out[n, t, e] = Σ_j x[n, t + j - k//2, e] · w[j, e] + b[e]

    Args:
        x (Tensor): (N, T, E)
        w (Tensor): (k, E), k odd
        b (Tensor): (E,)
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    k = w.shape[0]
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d_tokens: kernel length must be odd, got {k}")
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[2] or b.shape != (x.shape[2],):
        raise DimensionError(f"conv1d_tokens: input {x.shape}, kernel {w.shape}, bias {b.shape} are not compatible")
    t_len = x.shape[1]
    half = k // 2
    xp = np.pad(x.data, ((0, 0), (half, half), (0, 0)))
    out = np.broadcast_to(b.data, x.shape).copy()
    for j in range(k):
        out += xp[:, j:j + t_len, :] * w.data[j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for j in range(k):
            gxp[:, j:j + t_len, :] += g * w.data[j]
            gw[j] = (xp[:, j:j + t_len, :] * g).sum(axis=(0, 1))
        return gxp[:, half:half + t_len, :], gw, g.sum(axis=(0, 1))

    return make_result(out.astype(x.dtype, copy=False), (x, w, b), backward)


def linear(x, w, b=None):
    """x·w (+ b) over the last axis."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


__all__ = [
    "Tensor", "add", "sub", "mul", "scale", "relu", "sigmoid", "gelu", "elementwise",
    "matmul", "bmm", "reshape", "transpose", "concat", "slice_last", "split_last",
    "sum_all", "mean", "layernorm", "softmax_lastaxis", "dropout", "conv3d",
    "conv1d_tokens", "linear",
]
