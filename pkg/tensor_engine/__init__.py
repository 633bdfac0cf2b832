# Tensor engine package initialization
from .tensor import Tensor, Tape, no_grad, current_tape, DEFAULT_DTYPE
from .ops import (
    add,
    sub,
    mul,
    scale,
    relu,
    sigmoid,
    gelu,
    elementwise,
    matmul,
    bmm,
    reshape,
    transpose,
    concat,
    slice_last,
    split_last,
    sum_all,
    mean,
    layernorm,
    softmax_lastaxis,
    dropout,
    conv3d,
    conv1d_tokens,
    linear,
)
from .gradcheck import gradcheck

__all__ = [
    'Tensor',
    'Tape',
    'no_grad',
    'current_tape',
    'DEFAULT_DTYPE',
    'add',
    'sub',
    'mul',
    'scale',
    'relu',
    'sigmoid',
    'gelu',
    'elementwise',
    'matmul',
    'bmm',
    'reshape',
    'transpose',
    'concat',
    'slice_last',
    'split_last',
    'sum_all',
    'mean',
    'layernorm',
    'softmax_lastaxis',
    'dropout',
    'conv3d',
    'conv1d_tokens',
    'linear',
    'gradcheck',
]
