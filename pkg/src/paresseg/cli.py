"""Command-line entry point: ``paresseg <subcommand> ...``.

Config files are flat ``key = value`` text. Every training flag has a
config-file key of the same name (dashes become underscores); flags given on
the command line override the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import read_kv
from .data import (
    PhantomSpec,
    fold_split,
    load_case,
    load_dataset,
    load_split,
    save_dataset,
    save_split,
    save_volume,
    synth_dataset,
    train_test_ids,
)
from .data.case import case_dirs
from .errors import PaResSegError, UsageError
from .pipeline import TrainConfig, ablation_matrix, evaluate, infer_volume, train

TRAIN_FLAGS = ("fusion", "loss_kind", "lr", "batch_size", "epochs", "samples_per_epoch", "patch_size",
               "stage_channels", "mpf_independent", "augment", "dtype", "profile")
ABLATE_KEYS = ("strategies", "loss_kinds", "seeds")


def _kv(path: str | None) -> dict[str, str]:
    return read_kv(path) if path else {}


def _split_cases(data: str, split: str | None, fold: int | None, want: str) -> list:
    """Cases of ``data``; with a split file, the train or test part of ``fold``."""
    if split is None:
        return load_dataset(data)
    if fold is None:
        raise UsageError("--fold is required with --split")
    train_ids, test_ids = train_test_ids(load_split(split), fold)
    return load_dataset(data, train_ids if want == "train" else test_ids)


def _train_values(args, extra_skip=()) -> dict[str, str]:
    values = {k: v for k, v in _kv(args.config).items() if k not in extra_skip}
    for key in TRAIN_FLAGS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = str(flag)
    values["seed"] = str(args.seed)
    return values


def cmd_synth(args) -> int:
    spec = PhantomSpec.from_file(args.config, n_cases=args.n_cases) if args.config else \
        PhantomSpec(**({"n_cases": args.n_cases} if args.n_cases else {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = synth_dataset(spec, seed=args.seed)
    save_dataset(cases, out, with_weights=args.with_weights)
    spec.to_file(out / "phantom.cfg")
    (out / "synth.json").write_text(json.dumps({"seed": args.seed, "n_cases": len(cases)}) + "\n")
    print(f"wrote {len(cases)} cases to {out}")
    return 0


def cmd_split(args) -> int:
    ids = [d.name[len("case_"):] for d in case_dirs(args.data)]
    folds = fold_split(ids, args.k, args.seed)
    save_split(folds, args.out, args.seed)
    print(f"wrote {args.k} folds of {len(ids)} cases to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_flat(_train_values(args))
    cases = _split_cases(args.data, args.split, args.fold, "train")
    run = train(cases, cfg, args.out)
    print(f"trained {cfg.network.fusion}/{cfg.loss_kind} seed {cfg.seed} on {len(cases)} cases "
          f"in {run.seconds:.1f}s; final epoch loss {run.epoch_losses[-1]:.5f}")
    print(f"checkpoint: {run.checkpoint}")
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    case = load_case(args.case)
    mask = infer_volume(model, case)
    save_volume(mask, args.out)
    print(f"wrote mask with {int(mask.data.sum())} tumor voxels to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cases = _split_cases(args.data, args.split, args.fold, "test")
    report = evaluate(model, cases)
    txt, js = report.write(args.out)
    print(report.text_table())
    print(f"wrote {txt} and {js}")
    return 0


def cmd_ablate(args) -> int:
    values = _kv(args.config)
    matrix = {k: values[k] for k in ABLATE_KEYS if k in values}
    for key in ABLATE_KEYS:
        flag = getattr(args, key)
        if flag is not None:
            matrix[key] = flag
    missing = [k for k in ABLATE_KEYS if k not in matrix]
    if missing:
        raise UsageError(f"ablation needs {missing} (config keys or flags)")
    strategies = [s for s in matrix["strategies"].replace(" ", "").split(",") if s]
    kinds = [s for s in matrix["loss_kinds"].replace(" ", "").split(",") if s]
    seeds = [int(s) for s in matrix["seeds"].replace(" ", "").split(",") if s]
    args.seed = seeds[0]
    base = TrainConfig.from_flat(_train_values(args, extra_skip=ABLATE_KEYS))
    train_cases = _split_cases(args.data, args.split, args.fold, "train")
    test_cases = _split_cases(args.data, args.split, args.fold, "test")
    table = ablation_matrix(train_cases, test_cases, strategies, kinds, seeds, base, args.out,
                           workers=args.workers)
    txt, js = table.write(Path(args.out) / "ablation")
    print(table.text())
    print(f"wrote {txt} and {js}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    report = run_suite(seed=args.seed, verbose=True)
    print(f"{len(report.errors)} checks, worst relative error {report.worst:.2e} "
          f"(tolerance {report.tolerance:.0e}), {report.seconds:.1f}s")
    for name, err in report.failures().items():
        print(f"FAILED {name}: {err:.2e}")
    return 0 if report.passed else 1


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fusion", choices=["single", "dmp", "mpf", "msf", "pa_msf"])
    p.add_argument("--loss-kind", dest="loss_kind", choices=["ce", "be"])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--samples-per-epoch", dest="samples_per_epoch", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--stage-channels", dest="stage_channels", help="six comma-separated widths")
    p.add_argument("--profile", choices=["tiny", "paper"])
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--mpf-independent", dest="mpf_independent", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", help="split file written by 'paresseg split'")
    p.add_argument("--fold", type=int, help="test fold index within --split")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paresseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--config", help="PhantomSpec key-value file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-cases", dest="n_cases", type=int)
    p.add_argument("--with-weights", dest="with_weights", action="store_true",
                   help="also cache loss weight maps beside each case")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a seeded k-fold partition of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", help="training key-value file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_split_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict a tumor mask for one case directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True, help="a case_<id> directory")
    p.add_argument("--out", required=True, help="output volume directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset or test fold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report stem; writes <stem>.txt and <stem>.json")
    _add_split_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a strategy x loss x seed matrix")
    p.add_argument("--config", help="key-value file with strategies, loss_kinds, seeds and training keys")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategies")
    p.add_argument("--loss-kinds", dest="loss_kinds")
    p.add_argument("--seeds")
    p.add_argument("--workers", type=int, default=1, help="cells trained in parallel processes")
    _add_split_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the gradient-check suite; exit code 1 on failure")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (PaResSegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
