"""Synthetic two-phase liver phantoms with exact masks.

Each case is an ellipsoidal liver inside an ellipsoidal body, with one to a
few ellipsoidal tumors. Tumors are hypodense in PV and hyperdense in ART. In
the "PV-faint" fraction of cases the PV contrast is drawn near zero, so the
tumor is only visible in ART. ART contrast is blurred slightly, giving the
arterial phase softer borders.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter

from ..config import from_kv, read_kv, to_kv, write_kv
from ..errors import ConfigurationError, GenerationError
from .case import CaseRecord
from .volume import Volume

AIR_HU = -1000


@dataclass(frozen=True)
class PhantomSpec:
    n_cases: int = 200
    dims: tuple[int, ...] = (64, 64, 64)
    spacing_mm: tuple[float, ...] = (1.0, 1.0, 1.0)
    pv_faint_fraction: float = 0.5
    n_tumors_min: int = 1
    n_tumors_max: int = 3
    tumor_radius_min: float = 4.0
    tumor_radius_max: float = 10.0
    liver_radius_min: float = 0.30  # as a fraction of each dim
    liver_radius_max: float = 0.42
    body_hu: float = 30.0
    liver_hu_pv: float = 110.0
    liver_hu_art: float = 70.0
    pv_contrast_min: float = 35.0   # magnitude; tumors darker than liver in PV
    pv_contrast_max: float = 70.0
    faint_pv_contrast_max: float = 4.0
    art_contrast_min: float = 40.0  # tumors brighter than liver in ART
    art_contrast_max: float = 80.0
    art_blur_sigma: float = 1.0
    noise_std: float = 15.0
    contrast_margin: float = 2.0    # visible PV contrast >= margin * noise_std
    max_attempts: int = 100

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        self.validate()

    def validate(self) -> None:
        if self.n_cases < 1:
            raise ConfigurationError("n_cases must be positive")
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ConfigurationError(f"dims must be three ints >= 8, got {self.dims}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ConfigurationError("spacing_mm must be three positive numbers")
        if not 0.0 <= self.pv_faint_fraction <= 1.0:
            raise ConfigurationError("pv_faint_fraction must lie in [0, 1]")
        if not 1 <= self.n_tumors_min <= self.n_tumors_max:
            raise ConfigurationError("need 1 <= n_tumors_min <= n_tumors_max")
        for lo, hi, name in [(self.tumor_radius_min, self.tumor_radius_max, "tumor_radius"),
                             (self.liver_radius_min, self.liver_radius_max, "liver_radius"),
                             (self.pv_contrast_min, self.pv_contrast_max, "pv_contrast"),
                             (self.art_contrast_min, self.art_contrast_max, "art_contrast")]:
            if not 0 < lo <= hi:
                raise ConfigurationError(f"{name} range must satisfy 0 < min <= max, got [{lo}, {hi}]")
        if self.liver_radius_max >= 0.5:
            raise ConfigurationError("liver_radius_max must stay below half the volume")
        if self.noise_std < 0 or self.faint_pv_contrast_max < 0:
            raise ConfigurationError("noise_std and faint_pv_contrast_max must be non-negative")
        if self.pv_contrast_min < self.contrast_margin * self.noise_std:
            raise ConfigurationError(
                f"pv_contrast_min {self.pv_contrast_min} is below contrast_margin * noise_std "
                f"= {self.contrast_margin * self.noise_std}")

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "PhantomSpec":
        return from_kv(cls, read_kv(path), **overrides)

    def to_file(self, path: str | Path) -> Path:
        return write_kv(to_kv(self), path)


@dataclass(frozen=True)
class TumorTruth:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    pv_contrast: float
    art_contrast: float


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def synth_case(spec: PhantomSpec, rng: np.random.Generator, case_id: str, faint: bool):
    """One phantom case plus the ground-truth tumor parameters."""
    dims = np.array(spec.dims, dtype=float)
    mid = (dims - 1) / 2
    liver_r = rng.uniform(spec.liver_radius_min, spec.liver_radius_max, 3) * dims
    liver_c = mid + rng.uniform(-0.05, 0.05, 3) * dims
    liver = _ellipsoid(spec.dims, liver_c, liver_r)
    body = _ellipsoid(spec.dims, mid, np.array([dims[0], 0.48 * dims[1], 0.48 * dims[2]]))
    # tumors must sit strictly inside the liver
    inner = binary_erosion(liver)

    tumor = np.zeros(spec.dims, dtype=bool)
    truths = []
    pv_map = np.zeros(spec.dims)
    art_map = np.zeros(spec.dims)
    lo, hi = liver_c - liver_r, liver_c + liver_r
    for _ in range(int(rng.integers(spec.n_tumors_min, spec.n_tumors_max + 1))):
        for _attempt in range(spec.max_attempts):
            # radii are in in-plane voxels; z is rescaled so tumors are round in mm
            radii = rng.uniform(spec.tumor_radius_min, spec.tumor_radius_max, 3)
            radii[0] = max(1.0, radii[0] * spec.spacing_mm[1] / spec.spacing_mm[0])
            center = rng.uniform(lo + radii, hi - radii) if np.all(hi - lo > 2 * radii) else None
            if center is None:
                continue
            blob = _ellipsoid(spec.dims, center, radii)
            if blob.any() and not np.any(blob & ~inner):
                break
        else:
            raise GenerationError(
                f"case {case_id}: tumor did not fit inside the liver after {spec.max_attempts} attempts")
        if faint:
            pv_c = rng.uniform(-spec.faint_pv_contrast_max, spec.faint_pv_contrast_max)
        else:
            pv_c = -rng.uniform(spec.pv_contrast_min, spec.pv_contrast_max)
        art_c = rng.uniform(spec.art_contrast_min, spec.art_contrast_max)
        new = blob & ~tumor
        pv_map[new] = pv_c
        art_map[new] = art_c
        tumor |= blob
        truths.append(TumorTruth(tuple(center), tuple(radii), pv_c, art_c))

    if spec.art_blur_sigma > 0:
        art_map = gaussian_filter(art_map, spec.art_blur_sigma) * liver

    def phase(liver_hu, contrast):
        v = np.where(body, spec.body_hu, AIR_HU).astype(float)
        v[liver] = liver_hu
        v += contrast
        v += rng.normal(0.0, spec.noise_std, spec.dims) * body
        return Volume(np.clip(np.rint(v), -32768, 32767).astype(np.int16), spec.spacing_mm)

    pv = phase(spec.liver_hu_pv, pv_map)
    art = phase(spec.liver_hu_art, art_map)
    case = CaseRecord(case_id, pv, art, Volume.mask(tumor, spec.spacing_mm), Volume.mask(liver, spec.spacing_mm))
    return case, truths


def faint_flags(spec: PhantomSpec, seed: int) -> np.ndarray:
    """Exactly ``round(f * n)`` PV-faint cases, at seeded positions."""
    n_faint = int(round(spec.pv_faint_fraction * spec.n_cases))
    flags = np.zeros(spec.n_cases, dtype=bool)
    order = np.random.default_rng(np.random.SeedSequence([seed, 1])).permutation(spec.n_cases)
    flags[order[:n_faint]] = True
    return flags


def case_id_for(index: int) -> str:
    return f"{index:04d}"


def synth_dataset(spec: PhantomSpec, seed: int, with_truth: bool = False):
    """Deterministic list of ``CaseRecord``; each case has its own RNG stream."""
    flags = faint_flags(spec, seed)
    children = np.random.SeedSequence([seed, 0]).spawn(spec.n_cases)
    cases, truths = [], []
    for i, (child, faint) in enumerate(zip(children, flags)):
        case, truth = synth_case(spec, np.random.default_rng(child), case_id_for(i), bool(faint))
        cases.append(case)
        truths.append(truth)
    return (cases, truths, flags) if with_truth else cases
