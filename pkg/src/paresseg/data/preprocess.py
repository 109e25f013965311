"""Intensity windowing and liver-ROI masking."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import binary_dilation

from ..errors import ConfigurationError, DimensionError

HU_LO, HU_HI = -70.0, 180.0
ROI_DILATION = 5


def hu_window(vol: np.ndarray, lo: float = HU_LO, hi: float = HU_HI) -> np.ndarray:
    """Clamp to ``[lo, hi]`` and map linearly onto ``[0, 1]`` (float32)."""
    if not lo < hi:
        raise ConfigurationError(f"window needs lo < hi, got [{lo}, {hi}]")
    v = np.asarray(vol, dtype=np.float64)
    return ((np.clip(v, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def dilate_liver(liver: np.ndarray, size: int = ROI_DILATION) -> np.ndarray:
    """Per-slice dilation with a ``size x size`` square."""
    liver = np.asarray(liver).astype(bool)
    if liver.ndim != 3:
        raise DimensionError(f"liver mask must be 3D, got shape {liver.shape}")
    return binary_dilation(liver, structure=np.ones((1, size, size), dtype=bool))


def apply_liver_roi(vol: np.ndarray, liver: np.ndarray, size: int = ROI_DILATION) -> np.ndarray:
    """Zero every voxel outside the in-plane-dilated liver mask."""
    vol = np.asarray(vol)
    if vol.shape != np.shape(liver):
        raise DimensionError(f"volume {vol.shape} and liver mask {np.shape(liver)} differ in shape")
    return np.where(dilate_liver(liver, size), vol, 0).astype(vol.dtype, copy=False)
