"""Differentiable primitives.

Each function computes its forward value with numpy and attaches an adjoint
closure that maps the output gradient to gradients for its inputs.
Convolutions gather patches into a column matrix (im2col) and run a single
BLAS matmul.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def adjoint(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), adjoint)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def adjoint(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), adjoint)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), adjoint)


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad / bd, (a, b), adjoint)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping was active."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return Tensor._from_op(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# -- activations -----------------------------------------------------------

# -- non-smooth points ------------------------------------------------------

class KinkTape:
    """Records (or replays) every relu mask and maxpool winner, in call order.

    Replaying a tape evaluates the piecewise-smooth network on the branch that
    was active when the tape was recorded; finite differences on that branch
    are what backprop differentiates.
    """

    def __init__(self, replay: "KinkTape | None" = None):
        self.entries: list[np.ndarray] = []
        self._replay = None if replay is None else iter(replay.entries)
        self.digest = hashlib.sha1()

    def log(self, arr: np.ndarray) -> np.ndarray:
        self.digest.update(np.ascontiguousarray(arr).tobytes())
        if self._replay is not None:
            stored = next(self._replay)
            if stored.shape != arr.shape:
                raise DimensionError("kink tape replayed on a different graph")
            arr = stored
        self.entries.append(arr)
        return arr

    def same_branch(self, other: "KinkTape") -> bool:
        return self.digest.digest() == other.digest.digest()


_tape: KinkTape | None = None


@contextmanager
def kink_tape(replay: KinkTape | None = None):
    global _tape
    prev, _tape = _tape, KinkTape(replay)
    try:
        yield _tape
    finally:
        _tape = prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _tape is not None:
        mask = _tape.log(mask)
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                           lambda g: (g * mask,))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def pointwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigurationError(f"unknown pointwise kind {kind!r}")


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(s, (x,), adjoint)


softmax_over_axis = softmax


# -- reductions and shape plumbing -----------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), adjoint)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def adjoint(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._from_op(np.array(x.data[index]), (x,), adjoint)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), adjoint)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands or equally batched stacks of them."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), adjoint)


# -- convolution -------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Gather k x k windows of padded ``xp`` into a (C*k*k, B*Ho*Wo) matrix."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, b * ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, padded_shape: tuple[int, ...], k: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """Scatter-add a (C, k, k, B, Ho, Wo) column tensor back onto the image."""
    b, c, hp, wp = padded_shape
    out = np.zeros((c, b, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, b, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv extent ({n}+2*{pad}-{k})/{stride} is not a non-negative integer")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a (B, C, H, W) batch with a (Co, C, k, k) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    bsz, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c or kh != kw:
        raise DimensionError(f"kernel {kernel.shape} does not match input channels {c}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"bias shape {bias.shape} != ({co},)")
    k = kh
    ho = conv_output_extent(h, k, stride, pad)
    wo = conv_output_extent(w, k, stride, pad)

    xp = _pad(x.data, pad)
    cols, _, _ = _im2col(xp, k, stride)
    wmat = kernel.data.reshape(co, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(co, bsz, ho, wo).transpose(1, 0, 2, 3))

    def adjoint(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ g2
            gxp = _col2im(gcols, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor._from_op(out, parents, adjoint)


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 2,
                      k: int = 4, pad: int = 1) -> Tensor:
    """Fractionally strided convolution with a (Ci, Co, k, k) kernel.

    Only parameter combinations that upsample by exactly ``stride`` are
    accepted, so the layer is the shape inverse of ``conv2d`` with the same
    ``k``/``stride``/``pad``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"transposed_conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    bsz, ci, h, w = x.shape
    kci, co, kh, kw = kernel.shape
    if kci != ci or kh != k or kw != k:
        raise DimensionError(f"kernel {kernel.shape} does not match input channels {ci} / k={k}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"bias shape {bias.shape} != ({co},)")
    full_h, full_w = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = full_h - 2 * pad, full_w - 2 * pad
    if ho != stride * h or wo != stride * w:
        raise ConfigurationError(
            f"transposed conv k={k}, stride={stride}, pad={pad} maps {h} to {ho}, not {stride * h}")

    xm = x.data.transpose(1, 0, 2, 3).reshape(ci, -1)
    wmat = kernel.data.reshape(ci, -1)
    cols = wmat.T @ xm
    full = _col2im(cols, (bsz, co, full_h, full_w), k, stride, h, w)
    out = np.ascontiguousarray(full[:, :, pad:pad + ho, pad:pad + wo])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def adjoint(g):
        gcols, _, _ = _im2col(_pad(g, pad), k, stride)
        gx = (wmat @ gcols).reshape(ci, bsz, h, w).transpose(1, 0, 2, 3) if x.requires_grad else None
        gk = (xm @ gcols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor._from_op(out, parents, adjoint)


# -- pooling -----------------------------------------------------------------

def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first
    position in row-major window order."""
    if k != stride:
        raise ConfigurationError("maxpool2d supports only non-overlapping windows (k == stride)")
    bsz, c, h, w = x.shape
    if h % stride or w % stride:
        raise ConfigurationError(f"spatial extent {h}x{w} not divisible by stride {stride}")
    ho, wo = h // k, w // k
    win = x.data.reshape(bsz, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    if _tape is not None:
        arg = _tape.log(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def adjoint(g):
        gw = np.zeros((bsz, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(bsz, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, w)
        return (gx,)

    return Tensor._from_op(out, (x,), adjoint)


# -- batch normalisation -----------------------------------------------------

@dataclass
class RunningStats:
    """Per-channel running mean/variance of a batchnorm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches: int = field(default=0)

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_stats: RunningStats,
                mode: str = "train") -> Tensor:
    """Batch normalisation over (B, H, W) per channel.

    Train mode normalises with the biased batch variance and folds the
    unbiased variance into the running estimate; eval mode applies the
    running statistics as a fixed affine map.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_stats.mean.shape != (c,):
        raise DimensionError(f"batchnorm parameters do not match {c} channels")
    eps = running_stats.eps
    axes = (0, 2, 3)
    gd = gamma.data[None, :, None, None]

    if mode == "eval":
        inv = 1.0 / np.sqrt(running_stats.var + eps)
        xhat = (x.data - running_stats.mean[None, :, None, None]) * inv[None, :, None, None]
        out = gd * xhat + beta.data[None, :, None, None]
        scale = (gamma.data * inv)[None, :, None, None]

        def eval_adjoint(g):
            return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), eval_adjoint)
    if mode != "train":
        raise ConfigurationError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")

    n = x.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gd * xhat + beta.data[None, :, None, None]

    m = running_stats.momentum
    unbiased = var.reshape(c) * (n / max(n - 1, 1))
    running_stats.mean[:] = (1 - m) * running_stats.mean + m * mu.reshape(c)
    running_stats.var[:] = (1 - m) * running_stats.var + m * unbiased
    running_stats.num_batches += 1

    def adjoint(g):
        gb = g.sum(axis=axes)
        gg = (g * xhat).sum(axis=axes)
        gxhat = g * gd
        gx = inv / n * (n * gxhat - gxhat.sum(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), adjoint)
