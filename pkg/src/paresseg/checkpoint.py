"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PARESSEG1"            magic, 9 bytes
    u32                     format version
    u64                     header length in bytes
    header                  UTF-8 JSON: config, seed, tensor table
    payload                 concatenated little-endian arrays

Each tensor-table entry carries ``name``, ``shape``, ``dtype``, ``offset``
and ``nbytes`` relative to the start of the payload. Batchnorm statistics
are stored as ``<layer>.running_mean`` / ``<layer>.running_var`` entries.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .backbone import Model, NetworkConfig, build_network
from .errors import FormatError

MAGIC = b"PARESSEG1"
VERSION = 1
_PREFIX = struct.Struct("<IQ")


def _entries(model: Model):
    for name, t in model.params.items():
        yield name, t.data
    for name, st in model.bn_stats.items():
        yield f"{name}.running_mean", st.mean
        yield f"{name}.running_var", st.var


def save_checkpoint(model: Model, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    table, blobs, offset = [], [], 0
    for name, arr in _entries(model):
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": model.config.to_dict(),
        "seed": int(model.seed),
        "bn_batches": {n: int(s.num_batches) for n, s in model.bn_stats.items()},
        "tensors": table,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_PREFIX.pack(VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    return path


def read_header(path: str | Path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{path}: bad magic, not a PARESSEG1 checkpoint")
        prefix = fh.read(_PREFIX.size)
        if len(prefix) != _PREFIX.size:
            raise FormatError(f"{path}: truncated header prefix")
        version, hlen = _PREFIX.unpack(prefix)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: malformed header: {exc}") from exc
    return header, len(MAGIC) + _PREFIX.size + hlen


def load_checkpoint(path: str | Path) -> Model:
    header, start = read_header(path)
    config = NetworkConfig.from_dict(header["config"])
    model = build_network(config, header["seed"])
    payload = Path(path).read_bytes()[start:]
    known = {n: a for n, a in _entries(model)}
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in known:
            raise FormatError(f"{path}: unexpected tensor {name!r}")
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise FormatError(f"{path}: tensor {name!r} needs {lo + n} payload bytes, file has {len(payload)}")
        arr = np.frombuffer(payload[lo:lo + n], dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        target = known[name]
        if tuple(entry["shape"]) != target.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {entry['shape']}, expected {target.shape}")
        target[...] = arr.reshape(target.shape)
        seen.add(name)
    missing = set(known) - seen
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)[:5]}")
    for name, count in header.get("bn_batches", {}).items():
        model.bn_stats[name].num_batches = count
    return model
