"""Dense tensors with reverse-mode automatic differentiation recorded on a tape."""
import threading
from contextlib import contextmanager

import numpy as np

from exceptions import ContractError

DEFAULT_DTYPE = np.float32

# Per-thread recording state: stack of active tapes, a fallback tape, grad switch
_local = threading.local()


def _state():
    if not hasattr(_local, "stack"):
        _local.stack = []
        _local.default_tape = None
        _local.grad_enabled = True
    return _local


def grad_enabled():
    return _state().grad_enabled


@contextmanager
def no_grad():
    """Disable recording for the enclosed block (inference, finite differences)."""
    state = _state()
    previous, state.grad_enabled = state.grad_enabled, False
    try:
        yield
    finally:
        state.grad_enabled = previous


def current_tape():
    """Innermost active tape of this thread, else the thread's default tape."""
    state = _state()
    if state.stack:
        return state.stack[-1]
    if state.default_tape is None:
        state.default_tape = Tape()
    return state.default_tape


class Tensor:
    """N-dimensional float array participating in a gradient tape.

    Leaves are the tensors you construct; results of operations are non-leaf
    and only ever receive gradients transiently during ``backward``.
    """

    def __init__(self, data, requires_grad=False, dtype=None, name=""):
        if dtype is None:
            source = np.asarray(data)
            dtype = source.dtype if source.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.is_leaf = True
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self._tape is None:
            raise ContractError(f"tensor {self.name or self.shape} is not connected to a tape")
        self._tape.backward(self)

    def __add__(self, other):
        from tensor_engine import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from tensor_engine import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from tensor_engine import ops
        return ops.mul(self, other)

    def __matmul__(self, other):
        from tensor_engine import ops
        return ops.matmul(self, other)

    def sum(self):
        from tensor_engine import ops
        return ops.sum_all(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager to scope recording; a tape belongs to the thread
    that entered it.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _state().stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state().stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, inputs, output, backward):
        self.records.append(_Record(inputs, output, backward))

    def clear(self):
        for rec in self.records:
            rec.output._tape = None
        self.records = []

    def backward(self, loss):
        """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

        Records are replayed in reverse recording order; leaf gradients
        accumulate across calls.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            upstream = pending.pop(id(rec.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(rec.inputs, rec.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    tensor.grad = grad.astype(tensor.dtype, copy=True) if tensor.grad is None else tensor.grad + grad
                else:
                    key = id(tensor)
                    pending[key] = grad if key not in pending else pending[key] + grad


def make_result(data, inputs, backward, name=""):
    """Wrap ``data`` as the output of an operation over ``inputs``.

    ``backward`` maps the upstream gradient to a tuple of input gradients
    (``None`` for inputs that take none).
    """
    out = Tensor(data, dtype=data.dtype, name=name)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        tape = current_tape()
        out.requires_grad = True
        out.is_leaf = False
        out._tape = tape
        tape.record(tuple(inputs), out, backward)
    return out


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)
