"""Overlap metrics with per-case and pooled aggregation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import DimensionError, UndefinedMetricError, UsageError

log = logging.getLogger(__name__)

FIELDS = ("case_id", "dice", "voe", "rvd", "tpr", "tnr", "acc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"negative count in {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def gt_count(self) -> int:
        return self.tp + self.fn

    @property
    def pred_count(self) -> int:
        return self.tp + self.fp


def confusion(gt: np.ndarray, pred: np.ndarray) -> ConfusionCounts:
    gt, pred = np.asarray(gt), np.asarray(pred)
    if gt.shape != pred.shape:
        raise DimensionError(f"ground truth {gt.shape} and prediction {pred.shape} differ in shape")
    g, p = gt.astype(bool), pred.astype(bool)
    tp = int(np.count_nonzero(g & p))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(g)) - tp
    return ConfusionCounts(tp, fp, g.size - tp - fp - fn, fn)


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    # both volumes empty: they agree there is no tumor
    return 1.0 if denom == 0 else 2 * c.tp / denom


def voe(c: ConfusionCounts) -> float:
    union = c.tp + c.fp + c.fn
    return 0.0 if union == 0 else 1.0 - c.tp / union


def rvd(gt_count: int, pred_count: int) -> float:
    """Signed ``(|B| - |A|) / |A|``; undefined for an empty ground truth."""
    if gt_count <= 0:
        raise UndefinedMetricError("relative volume difference is undefined for an empty ground truth")
    return (pred_count - gt_count) / gt_count


def tpr(c: ConfusionCounts) -> float:
    pos = c.tp + c.fn
    return 1.0 if pos == 0 else c.tp / pos


def tnr(c: ConfusionCounts) -> float:
    neg = c.tn + c.fp
    return 1.0 if neg == 0 else c.tn / neg


def acc(c: ConfusionCounts) -> float:
    """Mean of the two class recalls."""
    return (tpr(c) + tnr(c)) / 2


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice: float
    voe: float
    rvd: float | None
    tpr: float
    tnr: float
    acc: float
    counts: ConfusionCounts

    @classmethod
    def from_counts(cls, case_id: str, c: ConfusionCounts) -> "CaseMetrics":
        try:
            r = rvd(c.gt_count, c.pred_count)
        except UndefinedMetricError:
            log.warning("case %s has an empty ground truth; rvd excluded", case_id)
            r = None
        return cls(str(case_id), dice(c), voe(c), r, tpr(c), tnr(c), acc(c), c)

    def record(self) -> dict:
        return {k: getattr(self, k) for k in FIELDS}


def evaluate_case(case_id: str, gt: np.ndarray, pred: np.ndarray) -> CaseMetrics:
    return CaseMetrics.from_counts(case_id, confusion(gt, pred))


@dataclass(frozen=True)
class Aggregate:
    dpc: float
    dg: float
    voe: float
    rvd: float | None
    tpr: float
    tnr: float
    acc: float
    n_cases: int
    rvd_excluded: tuple[str, ...] = ()


@dataclass
class MetricsReport:
    per_case: list[CaseMetrics]
    aggregate: Aggregate

    def to_dict(self) -> dict:
        agg = asdict(self.aggregate)
        agg["rvd_excluded"] = list(agg["rvd_excluded"])
        return {"cases": [c.record() for c in self.per_case], "aggregate": agg}

    def text_table(self) -> str:
        head = f"{'case_id':>12s} " + " ".join(f"{k:>8s}" for k in FIELDS[1:])
        lines = [head, "-" * len(head)]

        def fmt(v):
            return f"{'n/a':>8s}" if v is None else f"{v:8.4f}"

        for c in self.per_case:
            lines.append(f"{c.case_id:>12s} " + " ".join(fmt(getattr(c, k)) for k in FIELDS[1:]))
        a = self.aggregate
        lines.append("-" * len(head))
        lines.append(f"DPC {a.dpc:.4f}  DG {a.dg:.4f}  VOE {a.voe:.4f}  RVD {fmt(a.rvd).strip()}  "
                     f"TPR {a.tpr:.4f}  TNR {a.tnr:.4f}  ACC {a.acc:.4f}  (n={a.n_cases})")
        return "\n".join(lines)

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.txt`` (table) and ``<stem>.json`` (records)."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
        txt.write_text(self.text_table() + "\n")
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return txt, js


def _mean(values: Iterable[float]) -> float:
    vals = list(values)
    return math.fsum(vals) / len(vals)


def aggregate(per_case: Sequence[CaseMetrics]) -> MetricsReport:
    if not per_case:
        raise UsageError("cannot aggregate an empty list of cases")
    cases = sorted(per_case, key=lambda c: c.case_id)
    pooled = cases[0].counts
    for c in cases[1:]:
        pooled = pooled + c.counts
    rvds = [c.rvd for c in cases if c.rvd is not None]
    agg = Aggregate(
        dpc=_mean(c.dice for c in cases),
        dg=dice(pooled),
        voe=_mean(c.voe for c in cases),
        rvd=_mean(rvds) if rvds else None,
        tpr=_mean(c.tpr for c in cases),
        tnr=_mean(c.tnr for c in cases),
        acc=_mean(c.acc for c in cases),
        n_cases=len(cases),
        rvd_excluded=tuple(c.case_id for c in cases if c.rvd is None),
    )
    return MetricsReport(cases, agg)


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def marginal_slice_mask(gt: np.ndarray) -> np.ndarray:
    """Tumor voxels on the first or last axial slice of their own connected
    tumor component (26-connectivity)."""
    gt = np.asarray(gt).astype(bool)
    labels, n = ndimage.label(gt, structure=np.ones((3, 3, 3), dtype=bool))
    out = np.zeros_like(gt)
    for comp, box in enumerate(ndimage.find_objects(labels), start=1):
        for z in {box[0].start, box[0].stop - 1}:
            out[z] |= labels[z] == comp
    return out


def marginal_tpr(gt: np.ndarray, pred: np.ndarray) -> float | None:
    """Share of marginal-slice tumor voxels predicted as tumor; ``None`` without tumor."""
    m = marginal_slice_mask(gt)
    total = int(np.count_nonzero(m))
    if total == 0:
        return None
    return int(np.count_nonzero(m & np.asarray(pred).astype(bool))) / total
