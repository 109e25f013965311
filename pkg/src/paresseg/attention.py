"""Phase attention: channel self-attention on portal-venous features plus
cross-phase channel recalibration of arterial features.

All map-level functions accept either a single ``C x N`` matrix or a batch
``B x C x N``; statistics are computed independently per batch item.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .substrate import functional as F
from .substrate.tensor import Tensor


def self_attention_map(p_flat: Tensor) -> Tensor:
    """``m[j, i] = softmax_i(<p_i, p_j>)``; every row sums to one."""
    gram = F.matmul(p_flat, F.transpose(p_flat, _swap_last(p_flat.ndim)))
    return F.softmax(gram, axis=-1)


def intra_pa_apply(p: Tensor, m: Tensor) -> Tensor:
    """Refine ``p`` (``[B,] C x H x W``) with ``M^T P'`` and add the residual."""
    lead = p.shape[:-2]
    flat = F.reshape(p, lead + (p.shape[-2] * p.shape[-1],))
    refined = F.matmul(F.transpose(m, _swap_last(m.ndim)), flat)
    return F.add(F.reshape(refined, p.shape), p)


def cross_correlation_map(a_flat: Tensor, p_flat: Tensor) -> Tensor:
    """``x[i, j] = softmax_i(<a_i, p_j>)``; every column sums to one."""
    if a_flat.shape != p_flat.shape:
        raise DimensionError(f"phase features differ in shape: {a_flat.shape} vs {p_flat.shape}")
    logits = F.matmul(a_flat, F.transpose(p_flat, _swap_last(p_flat.ndim)))
    return F.softmax(logits, axis=-2)


def channel_scales(x: Tensor, as_printed: bool = False) -> Tensor:
    """Logistic of each row sum of the correlation map.

    ``as_printed=True`` uses ``1 / (1 + exp(+sum))``, which down-weights
    highly correlated channels; the default is the increasing logistic.
    """
    total = F.sum(x, axis=-1)
    if as_printed:
        total = F.mul(total, -1.0)
    return F.sigmoid(total)


def inter_pa_apply(a: Tensor, s: Tensor) -> Tensor:
    """``a_c * s_c + a_c`` for every channel ``c``."""
    if s.shape != a.shape[:-2]:
        raise DimensionError(f"scale vector {s.shape} does not match channels of {a.shape}")
    gain = F.reshape(F.add(s, 1.0), s.shape + (1, 1))
    return F.mul(a, gain)


@dataclass
class PaBlockParams:
    """The two channel-preserving convolutions that open each branch."""

    pv_kernel: Tensor
    pv_bias: Tensor
    art_kernel: Tensor
    art_bias: Tensor

    @property
    def channels(self) -> int:
        return self.pv_kernel.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.pv_kernel.shape[-1]

    def tensors(self) -> dict[str, Tensor]:
        return {
            "conv_pv.weight": self.pv_kernel,
            "conv_pv.bias": self.pv_bias,
            "conv_art.weight": self.art_kernel,
            "conv_art.bias": self.art_bias,
        }

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, kernel_size: int = 3,
             dtype=np.float64) -> "PaBlockParams":
        fan_in = channels * kernel_size * kernel_size
        std = np.sqrt(2.0 / fan_in)
        shape = (channels, channels, kernel_size, kernel_size)

        def kernel():
            return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)

        def bias():
            return Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

        return cls(kernel(), bias(), kernel(), bias())


@dataclass
class AttentionMaps:
    m: np.ndarray
    x: np.ndarray
    s: np.ndarray


def pa_block(f_pv: Tensor, f_art: Tensor, params: PaBlockParams, eq3_as_printed: bool = False,
             return_maps: bool = False):
    """Fuse same-shaped ``B x C x H x W`` phase features into ``B x 2C x H x W``."""
    if f_pv.shape != f_art.shape:
        raise DimensionError(f"phase features differ in shape: {f_pv.shape} vs {f_art.shape}")
    if f_pv.ndim != 4 or f_pv.shape[1] != params.channels:
        raise DimensionError(f"expected B x {params.channels} x H x W features, got {f_pv.shape}")
    pad = params.kernel_size // 2
    p = F.conv2d(f_pv, params.pv_kernel, params.pv_bias, stride=1, pad=pad)
    a = F.conv2d(f_art, params.art_kernel, params.art_bias, stride=1, pad=pad)
    b, c, h, w = p.shape
    p_flat = F.reshape(p, (b, c, h * w))
    a_flat = F.reshape(a, (b, c, h * w))

    m = self_attention_map(p_flat)
    x = cross_correlation_map(a_flat, p_flat)
    s = channel_scales(x, as_printed=eq3_as_printed)
    out = F.concat([intra_pa_apply(p, m), inter_pa_apply(a, s)], axis=1)
    if return_maps:
        return out, AttentionMaps(m.data, x.data, s.data)
    return out


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)
