"""Cases on disk, 2.5D training patches and their augmentation."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import DimensionError, FormatError, SamplingError
from ..loss import weight_volume
from .preprocess import apply_liver_roi, hu_window
from .volume import Volume, load_volume, save_volume

PLANES = ("pv", "art", "tumor_mask", "liver_mask")
_CASE_DIR = re.compile(r"^case_(.+)$")


@dataclass
class CaseRecord:
    case_id: str
    pv: Volume
    art: Volume
    tumor_mask: Volume
    liver_mask: Volume
    weight_map: Volume | None = None
    _inputs: tuple[np.ndarray, np.ndarray] | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        dims = self.pv.dims
        for name in ("art", "tumor_mask", "liver_mask"):
            if getattr(self, name).dims != dims:
                raise DimensionError(f"case {self.case_id}: {name} dims {getattr(self, name).dims} != pv {dims}")
        if self.weight_map is not None and self.weight_map.dims != dims:
            raise DimensionError(f"case {self.case_id}: weight map dims differ from pv")
        for name in ("tumor_mask", "liver_mask"):
            vol = getattr(self, name)
            if vol.dtype_code != "u8" or vol.data.max(initial=0) > 1:
                raise FormatError(f"case {self.case_id}: {name} must be a u8 {{0,1}} mask")
        if np.any(self.tumor_mask.data & ~self.liver_mask.data.astype(bool)):
            raise FormatError(f"case {self.case_id}: tumor mask extends outside the liver mask")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.pv.dims

    @property
    def tumor(self) -> np.ndarray:
        return self.tumor_mask.data

    @property
    def liver(self) -> np.ndarray:
        return self.liver_mask.data

    def inputs(self) -> tuple[np.ndarray, np.ndarray]:
        """Windowed, ROI-masked float32 PV and ART volumes (cached)."""
        if self._inputs is None:
            self._inputs = tuple(apply_liver_roi(hu_window(v.data), self.liver) for v in (self.pv, self.art))
        return self._inputs

    def weights(self) -> np.ndarray:
        if self.weight_map is None:
            self.weight_map = Volume(weight_volume(self.tumor).astype(np.float32), self.pv.spacing_mm)
        return self.weight_map.data

    def liver_slices(self) -> np.ndarray:
        return np.flatnonzero(self.liver.reshape(self.dims[0], -1).any(axis=1))


# -- storage -----------------------------------------------------------------

def save_case(case: CaseRecord, root: str | Path, with_weights: bool = False) -> Path:
    base = Path(root) / f"case_{case.case_id}"
    for name in PLANES:
        save_volume(getattr(case, name), base / name)
    if with_weights:
        case.weights()
        save_volume(case.weight_map, base / "weight_map")
    return base


def load_case(path: str | Path) -> CaseRecord:
    path = Path(path)
    m = _CASE_DIR.match(path.name)
    if not m:
        raise FormatError(f"{path}: case directories are named case_<id>")
    vols = {name: load_volume(path / name) for name in PLANES}
    weights = load_volume(path / "weight_map") if (path / "weight_map").exists() else None
    return CaseRecord(m.group(1), weight_map=weights, **vols)


def save_dataset(cases, root: str | Path, with_weights: bool = False) -> Path:
    root = Path(root)
    for case in cases:
        save_case(case, root, with_weights)
    return root


def case_dirs(root: str | Path) -> list[Path]:
    return sorted(p for p in Path(root).iterdir() if p.is_dir() and _CASE_DIR.match(p.name))


def load_dataset(root: str | Path, case_ids=None) -> list[CaseRecord]:
    dirs = case_dirs(root)
    if case_ids is not None:
        wanted = {str(c) for c in case_ids}
        dirs = [d for d in dirs if _CASE_DIR.match(d.name).group(1) in wanted]
    if not dirs:
        raise FormatError(f"{root}: no case_<id> directories found")
    return [load_case(d) for d in dirs]


# -- 2.5D patches ------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    """A 2.5D crop: centre slice ``z`` and in-plane square at ``(y0, x0)``."""

    z: int
    y0: int
    x0: int
    size: int


@dataclass
class TrainSample:
    pv: np.ndarray       # 3 x H x W
    art: np.ndarray      # 3 x H x W
    label: np.ndarray    # H x W, centre slice
    weight: np.ndarray   # H x W, centre slice
    case_id: str = ""
    windows: dict[str, Window] = field(default_factory=dict)
    transform: tuple[int, bool] = (0, False)


def stack_slices(vol: np.ndarray, z: int) -> np.ndarray:
    """Slices ``z-1, z, z+1`` as channels; out-of-range neighbours repeat the edge slice."""
    idx = np.clip([z - 1, z, z + 1], 0, vol.shape[0] - 1)
    return vol[idx]


def crop_window(case: CaseRecord, win: Window) -> TrainSample:
    pv, art = case.inputs()
    ys, xs = slice(win.y0, win.y0 + win.size), slice(win.x0, win.x0 + win.size)
    return TrainSample(
        pv=stack_slices(pv, win.z)[:, ys, xs].copy(),
        art=stack_slices(art, win.z)[:, ys, xs].copy(),
        label=case.tumor[win.z, ys, xs].copy(),
        weight=case.weights()[win.z, ys, xs].copy(),
        case_id=case.case_id,
        windows={"pv": win, "art": win, "label": win, "weight": win},
    )


def sample_patch(case: CaseRecord, rng: np.random.Generator, size: int) -> TrainSample:
    """Uniform liver slice, then a crop containing a random liver pixel of it."""
    _, ny, nx = case.dims
    if size > min(ny, nx):
        raise SamplingError(f"patch {size} exceeds in-plane dims {ny}x{nx}")
    zs = case.liver_slices()
    if zs.size == 0:
        raise SamplingError(f"case {case.case_id}: liver mask is empty")
    z = int(zs[rng.integers(zs.size)])
    ly, lx = np.nonzero(case.liver[z])
    k = rng.integers(ly.size)
    py, px = int(ly[k]), int(lx[k])
    y0 = int(rng.integers(max(0, py - size + 1), min(py, ny - size) + 1))
    x0 = int(rng.integers(max(0, px - size + 1), min(px, nx - size) + 1))
    return crop_window(case, Window(z, y0, x0, size))


def apply_transform(sample: TrainSample, k: int, flip: bool) -> TrainSample:
    """Rotate every plane by ``k`` quarter turns, then optionally mirror columns."""
    def t(a):
        a = np.rot90(a, k, axes=(-2, -1))
        return np.ascontiguousarray(a[..., ::-1] if flip else a)

    return replace(sample, pv=t(sample.pv), art=t(sample.art), label=t(sample.label),
                   weight=t(sample.weight), transform=(k % 4, bool(flip)))


def augment(sample: TrainSample, rng: np.random.Generator) -> TrainSample:
    if sample.pv.shape[-1] != sample.pv.shape[-2]:
        raise DimensionError("augmentation needs square patches")
    return apply_transform(sample, int(rng.integers(4)), bool(rng.integers(2)))


def collate(samples: list[TrainSample]) -> dict[str, np.ndarray]:
    return {
        "pv": np.stack([s.pv for s in samples]),
        "art": np.stack([s.art for s in samples]),
        "label": np.stack([s.label for s in samples]),
        "weight": np.stack([s.weight for s in samples]),
    }
