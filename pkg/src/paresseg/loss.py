"""Boundary-enhanced weighted cross-entropy and the plain cross-entropy baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DimensionError
from .substrate import functional as F
from .substrate.tensor import Tensor

CLAMP = 1e-7


@dataclass(frozen=True)
class WeightConstants:
    alpha: float = 1.0
    beta: float = 0.5
    w1: float = 0.8  # tumor class weight
    w2: float = 0.2  # background class weight

    @property
    def tumor_range(self) -> tuple[float, float]:
        return self.w1, self.alpha + self.w1

    @property
    def background_range(self) -> tuple[float, float]:
        return self.w2, self.beta + self.w2


DEFAULT_CONSTANTS = WeightConstants()


def soft_mask(gt: np.ndarray) -> np.ndarray:
    """3x3x3 mean of a binary volume, zero outside the volume.

    Zero padding is what lifts tumor weights on the first and last slices.
    """
    gt = np.asarray(gt)
    if gt.ndim != 3:
        raise DimensionError(f"soft_mask expects a 3D volume, got shape {gt.shape}")
    v = uniform_filter(gt.astype(np.float64), size=3, mode="constant", cval=0.0)
    # uniform_filter works in separable passes; snap rounding residue so exact
    # interior (1) and exterior (0) voxels stay exact
    return np.clip(np.round(v * 27.0) / 27.0, 0.0, 1.0)


def be_weight_map(v: np.ndarray, gt: np.ndarray, constants: WeightConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Per-voxel weights: tumor ``-a*v + a + W1``, background ``b*v + W2``."""
    v, gt = np.asarray(v, dtype=np.float64), np.asarray(gt)
    if v.shape != gt.shape:
        raise DimensionError(f"soft mask {v.shape} and labels {gt.shape} differ in shape")
    c = constants
    return np.where(gt > 0, -c.alpha * v + c.alpha + c.w1, c.beta * v + c.w2)


def weight_volume(gt: np.ndarray, constants: WeightConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    return be_weight_map(soft_mask(gt), gt, constants)


def _bce_terms(pred: Tensor, gt) -> Tensor:
    y = np.asarray(gt, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} and labels {y.shape} differ in shape")
    p = F.clip(pred, CLAMP, 1.0 - CLAMP)
    pos = F.mul(F.log(p), Tensor(y))
    neg = F.mul(F.log(F.sub(1.0, p)), Tensor(1.0 - y))
    return F.add(pos, neg)


def be_loss(pred: Tensor, gt, w) -> Tensor:
    """``mean(-w * [y log p + (1 - y) log(1 - p)])`` over every element."""
    w = np.asarray(w, dtype=pred.dtype)
    if w.shape != pred.shape:
        raise DimensionError(f"weights {w.shape} and prediction {pred.shape} differ in shape")
    return F.mul(F.mean(F.mul(_bce_terms(pred, gt), Tensor(w))), -1.0)


def ce_loss(pred: Tensor, gt) -> Tensor:
    return F.mul(F.mean(_bce_terms(pred, gt)), -1.0)
