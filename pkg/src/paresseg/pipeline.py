"""Training loop, whole-volume inference, evaluation and the ablation matrix."""

from __future__ import annotations

import json
import logging
import math
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backbone import FUSIONS, Model, NetworkConfig, build_network, forward
from .checkpoint import save_checkpoint
from .config import coerce_kv
from .data.case import CaseRecord, augment, collate, sample_patch, stack_slices
from .data.preprocess import dilate_liver
from .data.tiling import extract_tiles, stitch, tile_plan
from .data.volume import Volume
from .errors import ConfigurationError, DivergenceError, InferenceError, UsageError
from .loss import be_loss, ce_loss
from .metrics import MetricsReport, aggregate, evaluate_case, marginal_tpr
from .substrate import Adam, Tensor
from .substrate import functional as F

log = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "be")
TABLE_COLUMNS = ("DPC", "DG", "VOE", "RVD")


@dataclass(frozen=True)
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig.tiny)
    loss_kind: str = "ce"
    lr: float = 5e-4
    batch_size: int = 8
    epochs: int = 4
    seed: int = 0
    # None: four random draws per training liver slice
    samples_per_epoch: int | None = None
    mpf_independent: bool = True
    augment: bool = True

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        for name in ("batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.samples_per_epoch is not None and self.samples_per_epoch < 1:
            raise ConfigurationError(f"samples_per_epoch must be positive, got {self.samples_per_epoch}")

    def resolved(self, cases: Sequence[CaseRecord]) -> "TrainConfig":
        if self.samples_per_epoch is not None:
            return self
        n_slices = sum(int(c.liver_slices().size) for c in cases)
        return replace(self, samples_per_epoch=4 * n_slices)

    @property
    def steps_per_epoch(self) -> int:
        if self.samples_per_epoch is None:
            raise UsageError("resolve samples_per_epoch against a dataset first")
        return math.ceil(self.samples_per_epoch / self.batch_size)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        net = d.pop("network", None)
        if isinstance(net, dict):
            net = NetworkConfig.from_dict(net)
        return cls(network=net if net is not None else NetworkConfig.tiny(), **d)

    @classmethod
    def from_flat(cls, values: dict) -> "TrainConfig":
        """Build from one flat mapping; keys naming ``NetworkConfig`` fields go to the network."""
        net_names = {f.name for f in fields(NetworkConfig)}
        own_names = {f.name for f in fields(cls)} - {"network"}
        net_kw = coerce_kv(NetworkConfig, {k: v for k, v in values.items() if k in net_names})
        own_kw = coerce_kv(cls, {k: v for k, v in values.items() if k in own_names})
        unknown = set(values) - net_names - own_names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        profile = net_kw.pop("profile", "tiny")
        if profile not in ("tiny", "paper"):
            raise ConfigurationError(f"profile must be tiny or paper, got {profile!r}")
        net = getattr(NetworkConfig, profile)(**net_kw)
        return cls(network=net, **own_kw)


@dataclass
class RunArtifacts:
    checkpoint: Path | None
    step_losses: list[float]
    epoch_losses: list[float]
    config: dict
    model: Model
    report: MetricsReport | None = None
    seconds: float = 0.0


# -- training ----------------------------------------------------------------

def _phase_inputs(model: Model, pv: np.ndarray, art: np.ndarray):
    return (pv, None) if model.config.fusion == "single" else (pv, art)


def draw_batch(cases: Sequence[CaseRecord], rng: np.random.Generator, cfg: TrainConfig) -> dict[str, np.ndarray]:
    """Uniform case, then :func:`sample_patch`, then (optionally) a random flip/rotation."""
    samples = []
    for _ in range(cfg.batch_size):
        s = sample_patch(cases[int(rng.integers(len(cases)))], rng, cfg.network.patch_size)
        samples.append(augment(s, rng) if cfg.augment else s)
    return collate(samples)


def _objective(prob: Tensor, batch: dict, cfg: TrainConfig) -> Tensor:
    tumor = F.getitem(prob, (slice(None), 1))
    if cfg.loss_kind == "be":
        return be_loss(tumor, batch["label"], batch["weight"])
    return ce_loss(tumor, batch["label"])


def batch_loss(model: Model, batch: dict, cfg: TrainConfig) -> Tensor:
    """Scalar training loss; independent MPF training sums the two branch losses."""
    pv, art = _phase_inputs(model, batch["pv"], batch["art"])
    if model.config.fusion == "mpf" and cfg.mpf_independent:
        prob_pv, prob_art = model.branch_outputs(pv, art)
        # the branches share no parameters, so each gets only its own loss gradient
        return F.add(_objective(prob_pv, batch, cfg), _objective(prob_art, batch, cfg))
    return _objective(forward(model, pv, art), batch, cfg)


def train(cases: Sequence[CaseRecord], cfg: TrainConfig, out_dir: str | Path | None = None,
          progress: Callable[[int, int, float], None] | None = None) -> RunArtifacts:
    """Seeded Adam training from scratch. Writes ``model.ckpt`` and ``losses.json`` to ``out_dir``."""
    if not cases:
        raise UsageError("train needs at least one case")
    p = cfg.network.patch_size
    for c in cases:
        if min(c.dims[1:]) < p:
            raise UsageError(f"case {c.case_id} in-plane dims {c.dims[1:]} are smaller than patch {p}")
    cfg = cfg.resolved(cases)
    t0 = time.perf_counter()
    model = build_network(cfg.network, cfg.seed).train()
    opt = Adam(model.parameters(), lr=cfg.lr)
    # sampling stream is separate from the initialisation stream
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    step_losses: list[float] = []
    epoch_losses: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        this_epoch = []
        for _ in range(cfg.steps_per_epoch):
            batch = draw_batch(cases, rng, cfg)
            opt.zero_grad()
            loss = batch_loss(model, batch, cfg)
            value = float(loss.item())
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            loss.backward()
            opt.step()
            step_losses.append(value)
            this_epoch.append(value)
            if progress is not None:
                progress(epoch, step, value)
            step += 1
        epoch_losses.append(math.fsum(this_epoch) / len(this_epoch))
        log.info("epoch %d/%d mean loss %.5f", epoch + 1, cfg.epochs, epoch_losses[-1])
    model.eval()
    snapshot = cfg.to_dict()
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(model, out / "model.ckpt", extra={"train_config": snapshot})
        (out / "losses.json").write_text(json.dumps(
            {"step_losses": step_losses, "epoch_losses": epoch_losses, "config": snapshot}, indent=1) + "\n")
    return RunArtifacts(ckpt, step_losses, epoch_losses, snapshot, model,
                        seconds=time.perf_counter() - t0)


# -- inference ---------------------------------------------------------------

def slice_probability(model, pv3: np.ndarray, art3: np.ndarray | None, overlap: float = 0.5,
                      batch_size: int = 16) -> np.ndarray:
    """Tumor probability over a whole ``3 x H x W`` slice triple via overlap tiles."""
    patch = model.config.patch_size
    windows = tile_plan(pv3.shape, patch, overlap)
    tiles_pv = extract_tiles(pv3, windows, patch)
    tiles_art = None if art3 is None else extract_tiles(art3, windows, patch)
    prob = model.predict(tiles_pv, tiles_art, batch_size=batch_size)
    return stitch(windows, prob[:, 1], pv3.shape)


def infer_volume(model, case: CaseRecord, overlap: float = 0.5, batch_size: int = 16,
                 return_probability: bool = False):
    """Binary tumor mask for a whole case, zero outside the dilated liver ROI.

    Slices whose ROI is empty are skipped, since the mask is zero there anyway.
    """
    patch = model.config.patch_size
    nz, ny, nx = case.dims
    if min(ny, nx) < patch:
        raise InferenceError(f"case {case.case_id}: in-plane dims {ny}x{nx} are smaller than patch {patch}")
    needs_art = model.config.fusion != "single"
    roi = dilate_liver(case.liver)
    pv, art = case.inputs()
    prob = np.zeros(case.dims, dtype=np.float64)
    for z in np.flatnonzero(roi.any(axis=(1, 2))):
        art3 = stack_slices(art, z) if needs_art else None
        prob[z] = slice_probability(model, stack_slices(pv, z), art3, overlap, batch_size)
    mask = Volume.mask((prob > 0.5) & roi, case.pv.spacing_mm)
    return (mask, prob) if return_probability else mask


def predict_cases(model, cases: Sequence[CaseRecord], **kw) -> dict[str, np.ndarray]:
    return {c.case_id: infer_volume(model, c, **kw).data for c in cases}


def report_from_masks(cases: Sequence[CaseRecord], masks: dict[str, np.ndarray]) -> MetricsReport:
    return aggregate([evaluate_case(c.case_id, c.tumor, masks[c.case_id]) for c in cases])


def mean_marginal_tpr(cases: Sequence[CaseRecord], masks: dict[str, np.ndarray]) -> float:
    """Mean over cases of the marginal-slice true positive rate."""
    vals = [marginal_tpr(c.tumor, masks[c.case_id]) for c in cases]
    vals = [v for v in vals if v is not None]
    if not vals:
        raise UsageError("no case has tumor voxels")
    return math.fsum(vals) / len(vals)


def evaluate(model, cases: Sequence[CaseRecord], **kw) -> MetricsReport:
    if not cases:
        raise UsageError("evaluate needs at least one case")
    return report_from_masks(cases, predict_cases(model, cases, **kw))


# -- ablation ----------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    strategy: str
    loss_kind: str
    seed: int
    dpc: float
    dg: float
    voe: float
    rvd: float | None
    marginal_tpr: float
    seconds: float = 0.0


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def cells(self) -> list[tuple[str, str]]:
        seen: dict[tuple[str, str], None] = {}
        for r in self.rows:
            seen.setdefault((r.strategy, r.loss_kind), None)
        return list(seen)

    def cell_rows(self, strategy: str, loss_kind: str) -> list[AblationRow]:
        return [r for r in self.rows if r.strategy == strategy and r.loss_kind == loss_kind]

    def means(self) -> dict[tuple[str, str], dict[str, float | None]]:
        out = {}
        for key in self.cells():
            rows = self.cell_rows(*key)
            rvds = [r.rvd for r in rows if r.rvd is not None]
            out[key] = {
                "dpc": float(np.mean([r.dpc for r in rows])),
                "dg": float(np.mean([r.dg for r in rows])),
                "voe": float(np.mean([r.voe for r in rows])),
                "rvd": float(np.mean(rvds)) if rvds else None,
                "marginal_tpr": float(np.mean([r.marginal_tpr for r in rows])),
                "n_seeds": len(rows),
            }
        return out

    def text(self) -> str:
        def fmt(v):
            return f"{'n/a':>8s}" if v is None else f"{v:8.4f}"

        head = f"{'strategy':>8s} {'loss':>4s} {'seed':>6s} " + " ".join(f"{c:>8s}" for c in TABLE_COLUMNS) \
            + f" {'mTPR':>8s}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.strategy:>8s} {r.loss_kind:>4s} {r.seed:>6d} "
                         + " ".join(fmt(v) for v in (r.dpc, r.dg, r.voe, r.rvd)) + f" {fmt(r.marginal_tpr)}")
        lines.append("-" * len(head))
        for (s, k), m in self.means().items():
            lines.append(f"{s:>8s} {k:>4s} {'mean':>6s} "
                         + " ".join(fmt(m[c]) for c in ("dpc", "dg", "voe", "rvd")) + f" {fmt(m['marginal_tpr'])}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "columns": list(TABLE_COLUMNS),
            "rows": [asdict(r) for r in self.rows],
            "means": [{"strategy": s, "loss_kind": k, **m} for (s, k), m in self.means().items()],
        }

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
        txt.write_text(self.text() + "\n")
        js.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return txt, js


def run_cell(train_cases, test_cases, cfg: TrainConfig, out_dir: Path | None = None) -> AblationRow:
    t0 = time.perf_counter()
    run = train(train_cases, cfg, out_dir)
    masks = predict_cases(run.model, test_cases)
    agg = report_from_masks(test_cases, masks).aggregate
    row = AblationRow(cfg.network.fusion, cfg.loss_kind, cfg.seed, agg.dpc, agg.dg, agg.voe, agg.rvd,
                      mean_marginal_tpr(test_cases, masks), time.perf_counter() - t0)
    log.info("%s/%s seed %d: DPC %.4f DG %.4f (%.0fs)", row.strategy, row.loss_kind, row.seed,
             row.dpc, row.dg, row.seconds)
    return row


_POOL_JOB: tuple | None = None


def _pool_cell(args):
    train_cases, test_cases, cell_fn = _POOL_JOB
    cfg, sub = args
    return cell_fn(train_cases, test_cases, cfg, sub)


def ablation_matrix(train_cases: Sequence[CaseRecord], test_cases: Sequence[CaseRecord],
                    strategies: Sequence[str], loss_kinds: Sequence[str], seeds: Sequence[int],
                    base: TrainConfig | None = None, out_dir: str | Path | None = None,
                    cell_fn: Callable[..., AblationRow] = run_cell, workers: int = 1) -> AblationTable:
    """Train and evaluate every (strategy, loss, seed) cell on a fixed split.

    With ``workers > 1`` cells run in forked worker processes. Each cell is
    seeded on its own, so the rows do not depend on the worker count; they
    are returned in matrix order.
    """
    base = base or TrainConfig()
    bad = [s for s in strategies if s not in FUSIONS]
    if bad:
        raise ConfigurationError(f"unknown strategies {bad}; expected a subset of {FUSIONS}")
    bad = [k for k in loss_kinds if k not in LOSS_KINDS]
    if bad:
        raise ConfigurationError(f"unknown loss kinds {bad}; expected a subset of {LOSS_KINDS}")
    if workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {workers}")
    jobs = []
    for strategy in strategies:
        for kind in loss_kinds:
            for seed in seeds:
                cfg = replace(base, network=base.network.with_(fusion=strategy), loss_kind=kind, seed=int(seed))
                sub = None if out_dir is None else Path(out_dir) / f"{strategy}_{kind}_{seed}"
                jobs.append((cfg, sub))
    workers = min(workers, len(jobs))
    if workers <= 1 or "fork" not in mp.get_all_start_methods():
        return AblationTable([cell_fn(train_cases, test_cases, cfg, sub) for cfg, sub in jobs])
    # forked children inherit the cases instead of unpickling them per task
    global _POOL_JOB
    _POOL_JOB = (train_cases, test_cases, cell_fn)
    try:
        with ProcessPoolExecutor(workers, mp_context=mp.get_context("fork")) as pool:
            rows = list(pool.map(_pool_cell, jobs))
    finally:
        _POOL_JOB = None
    return AblationTable(rows)
