"""Directory-based volume container: ``meta.json`` plus a raw payload.

``meta.json`` holds ``dims`` ([Z, Y, X]), ``spacing_mm``, ``dtype`` (one of
``i16``, ``u8``, ``f32``), ``order`` ("ZYX") and ``endian`` ("little");
``data.raw`` is the row-major payload with Z slowest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DimensionError, FormatError

DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1"), "f32": np.dtype("<f4")}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in DTYPES.items()}


@dataclass
class Volume:
    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimensionError(f"a volume needs three positive dims, got {self.data.shape}")
        if self.dtype_code is None:
            raise FormatError(f"dtype {self.data.dtype} is not one of i16, u8, f32")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise FormatError(f"spacing_mm must be three positive numbers, got {self.spacing_mm}")

    @classmethod
    def mask(cls, data, spacing_mm=(1.0, 1.0, 1.0)) -> "Volume":
        arr = np.asarray(data)
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise FormatError("mask volumes must contain only 0 and 1")
        return cls(arr.astype(np.uint8), spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def dtype_code(self) -> str | None:
        return _CODES.get(self.data.dtype.newbyteorder("="))

    def meta(self) -> dict:
        return {"dims": list(self.dims), "spacing_mm": list(self.spacing_mm), "dtype": self.dtype_code,
                "order": "ZYX", "endian": "little"}


def save_volume(vol: Volume, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "meta.json").write_text(json.dumps(vol.meta(), indent=1))
    payload = np.ascontiguousarray(vol.data, dtype=DTYPES[vol.dtype_code])
    (path / "data.raw").write_bytes(payload.tobytes())
    return path


def _field(meta: dict, key: str, path: Path):
    if key not in meta:
        raise FormatError(f"{path}: meta.json lacks field {key!r}")
    return meta[key]


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: missing meta.json") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed meta.json: {exc}") from exc
    if not isinstance(meta, dict):
        raise FormatError(f"{path}: meta.json must hold an object")
    dims = _field(meta, "dims", path)
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims)):
        raise FormatError(f"{path}: field 'dims' must be three positive ints, got {dims!r}")
    code = _field(meta, "dtype", path)
    if code not in DTYPES:
        raise FormatError(f"{path}: field 'dtype' is {code!r}, expected one of {sorted(DTYPES)}")
    if meta.get("order", "ZYX") != "ZYX":
        raise FormatError(f"{path}: field 'order' must be 'ZYX', got {meta['order']!r}")
    if meta.get("endian", "little") != "little":
        raise FormatError(f"{path}: field 'endian' must be 'little', got {meta['endian']!r}")
    spacing = _field(meta, "spacing_mm", path)
    raw = (path / "data.raw").read_bytes() if (path / "data.raw").exists() else None
    if raw is None:
        raise FormatError(f"{path}: missing data.raw")
    expected = int(np.prod(dims)) * DTYPES[code].itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: data.raw holds {len(raw)} bytes, dims/dtype need {expected}")
    data = np.frombuffer(raw, dtype=DTYPES[code]).reshape(dims).astype(DTYPES[code].newbyteorder("="))
    try:
        return Volume(data, tuple(spacing))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: field 'spacing_mm' invalid: {spacing!r}") from exc
