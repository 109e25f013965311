"""Overlap-tile plans for whole-slice inference, and probability stitching."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DimensionError, InferenceError


def _starts(extent: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        # last window clamped to the border
        starts.append(extent - patch)
    return starts


def tile_plan(dims: Sequence[int], patch: int, overlap_frac: float = 0.5) -> list[tuple[int, int]]:
    """Top-left corners of ``patch x patch`` windows covering an ``H x W`` plane."""
    h, w = int(dims[-2]), int(dims[-1])
    if patch > min(h, w):
        raise InferenceError(f"patch {patch} exceeds plane {h}x{w}")
    if not 0.0 <= overlap_frac < 1.0:
        raise InferenceError(f"overlap_frac must lie in [0, 1), got {overlap_frac}")
    stride = max(1, int(round(patch * (1.0 - overlap_frac))))
    return [(y, x) for y in _starts(h, patch, stride) for x in _starts(w, patch, stride)]


def coverage(dims: Sequence[int], windows, patch: int) -> np.ndarray:
    count = np.zeros((int(dims[-2]), int(dims[-1])), dtype=np.int64)
    for y, x in windows:
        count[y:y + patch, x:x + patch] += 1
    return count


def stitch(windows, patches: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Average ``N x C x p x p`` (or ``N x p x p``) patch outputs per pixel."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape[0] != len(windows):
        raise DimensionError(f"{len(windows)} windows but {patches.shape[0]} patches")
    squeeze = patches.ndim == 3
    if squeeze:
        patches = patches[:, None]
    n, c, p, q = patches.shape
    if p != q:
        raise DimensionError(f"patches must be square, got {p}x{q}")
    h, w = int(dims[-2]), int(dims[-1])
    acc = np.zeros((c, h, w))
    count = np.zeros((h, w))
    for (y, x), patch in zip(windows, patches):
        acc[:, y:y + p, x:x + p] += patch
        count[y:y + p, x:x + p] += 1
    if np.any(count == 0):
        raise InferenceError("tile plan leaves pixels uncovered")
    out = acc / count
    return out[0] if squeeze else out


def extract_tiles(plane: np.ndarray, windows, patch: int) -> np.ndarray:
    """``C x H x W`` plane -> ``N x C x p x p`` stack of windows."""
    return np.stack([plane[..., y:y + patch, x:x + patch] for y, x in windows])
