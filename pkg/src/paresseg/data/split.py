"""Seeded k-fold partitions of case ids."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import FormatError, UsageError


def fold_split(case_ids: Sequence[str], k: int, seed: int) -> list[list[str]]:
    """Shuffle ``case_ids`` with ``seed`` and deal them into ``k`` folds
    whose sizes differ by at most one."""
    ids = sorted(str(c) for c in case_ids)
    if len(set(ids)) != len(ids):
        raise UsageError("case ids must be unique")
    if not 1 <= k <= len(ids):
        raise UsageError(f"cannot split {len(ids)} cases into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return [sorted(ids[i] for i in chunk) for chunk in np.array_split(order, k)]


def train_test_ids(folds: list[list[str]], test_fold: int) -> tuple[list[str], list[str]]:
    if not 0 <= test_fold < len(folds):
        raise UsageError(f"test fold {test_fold} out of range for {len(folds)} folds")
    train = sorted(c for i, f in enumerate(folds) if i != test_fold for c in f)
    return train, list(folds[test_fold])


def save_split(folds: list[list[str]], path: str | Path, seed: int) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"k": len(folds), "seed": seed, "folds": folds}, indent=1) + "\n")
    return path


def load_split(path: str | Path) -> list[list[str]]:
    try:
        data = json.loads(Path(path).read_text())
        folds = data["folds"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a split file ({exc})") from exc
    return [[str(c) for c in f] for f in folds]
