"""Numpy tensor substrate: reverse-mode autodiff, layer primitives, Adam."""

from .functional import (
    RunningStats,
    add,
    batchnorm2d,
    clip,
    concat,
    conv2d,
    div,
    exp,
    getitem,
    log,
    matmul,
    maxpool2d,
    mean,
    mul,
    pointwise,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_over_axis,
    sub,
    transpose,
    transposed_conv2d,
)
from .functional import sum as tsum
from .gradcheck import check_gradients, check_probes, finite_diff_gradcheck, relative_error
from .optim import Adam, AdamState, adam_step
from .tensor import Graph, Tensor, as_tensor, backward, grad_enabled, no_grad, reverse_backward

__all__ = [
    "Adam", "AdamState", "Graph", "RunningStats", "Tensor", "adam_step", "add", "as_tensor",
    "backward", "batchnorm2d", "check_gradients", "check_probes", "clip", "concat", "conv2d", "div", "exp",
    "finite_diff_gradcheck", "getitem", "grad_enabled", "log", "matmul", "maxpool2d", "mean",
    "mul", "no_grad", "pointwise", "relative_error", "relu", "reshape", "reverse_backward",
    "sigmoid", "softmax", "softmax_over_axis", "sub", "transpose", "transposed_conv2d", "tsum",
]
