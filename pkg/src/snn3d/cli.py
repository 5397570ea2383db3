"""snn3d command line: train, eval, gradcheck, ablate, shuffle-diag, gen-data.

Every subcommand reads an optional JSON experiment config; flags override
individual fields.  Usage errors, unreadable or malformed configs exit with
status 2; runtime failures exit with status 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError
from .experiments import (
    ABLATION_COLUMNS,
    DIAGNOSTIC_COLUMNS,
    GRADCHECK_TARGETS,
    GRADCHECK_TOLERANCE,
    TIMING_COLUMNS,
    TRAIN_COLUMNS,
    ExperimentConfig,
    dataset_hash,
    evaluate_checkpoint,
    history_rows,
    make_dataset,
    run_ablation,
    run_gradcheck,
    run_shuffle_diagnostic,
    run_train,
    save_network,
    write_csv,
    write_manifest,
)

log = logging.getLogger("snn3d")

EXIT_USAGE = 2
TIMINGS_FILE = "timings.csv"


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config (defaults apply when omitted)")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, help="sets the network, training and dataset seeds together")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snn3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one config; write metrics, checkpoint and manifest")
    _add_config_flags(p)
    p.add_argument("--shuffle", action="store_true", help="shuffle neuron inputs along time")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the config's test split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--shuffle", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of a tape gradient")
    p.add_argument("--target", choices=sorted(GRADCHECK_TARGETS), default="conv3d")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)

    p = sub.add_parser("ablate", help="run the ablation matrix, one CSV row per cell")
    _add_config_flags(p)

    p = sub.add_parser("shuffle-diag", help="ordered vs temporally shuffled arms")
    _add_config_flags(p)
    p.add_argument("--eval-only", action="store_true", help="re-evaluate the ordered model instead of retraining")

    p = sub.add_parser("gen-data", help="generate the config's dataset into an .npz file")
    _add_config_flags(p)
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config is not None else ExperimentConfig()
    train = {}
    for flag, name in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            train[name] = getattr(args, flag)
    if getattr(args, "shuffle", False):
        train["shuffle_eval"] = True
    elif cfg.diagnostic.shuffle:
        train["shuffle_eval"] = True
    try:
        if train:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train))
        if args.seed is not None:
            cfg = dataclasses.replace(
                cfg,
                network=dataclasses.replace(cfg.network, seed=args.seed),
                dataset=dataclasses.replace(cfg.dataset, seed=args.seed),
            )
        if args.out is not None:
            cfg = dataclasses.replace(cfg, output=dataclasses.replace(cfg.output, dir=args.out))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def cmd_train(args, cfg: ExperimentConfig) -> int:
    result = run_train(cfg)
    out = cfg.output
    write_csv(out.path(out.metrics), TRAIN_COLUMNS, history_rows(result))
    extra = {}
    if out.checkpoint:
        save_network(out.path(out.checkpoint), result.net)
        extra["checkpoint"] = out.checkpoint
    write_manifest(out.path(out.manifest), "train", cfg, result.dataset_hash, extra)
    print(f"{result.metric}={result.value!r}")
    return 0


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    name, value, dhash = evaluate_checkpoint(cfg, args.checkpoint, args.shuffle or None)
    out = cfg.output
    write_csv(out.path(out.metrics), ("metric", "value", "shuffled"), [{"metric": name, "value": value, "shuffled": bool(args.shuffle)}])
    write_manifest(out.path(out.manifest), "eval", cfg, dhash, {"checkpoint": str(args.checkpoint)})
    print(f"{name}={value!r}")
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.target, args.seed)
    ok = report.max_rel_error < args.tolerance
    print(f"gradcheck {args.target}: max relative error {report.max_rel_error:.3e} (worst: {report.worst}) {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    rows = run_ablation(cfg)
    out = cfg.output
    write_csv(out.path(out.metrics), ABLATION_COLUMNS, rows)
    write_csv(out.path(TIMINGS_FILE), TIMING_COLUMNS, rows)
    write_manifest(out.path(out.manifest), "ablate", cfg, None, {"cells": len(rows), "timings": TIMINGS_FILE})
    failed = sum(bool(r["error"]) for r in rows)
    print(f"{len(rows)} cells, {failed} failed")
    return 0


def cmd_shuffle_diag(args, cfg: ExperimentConfig) -> int:
    data = make_dataset(cfg)
    report = run_shuffle_diagnostic(cfg, retrain=not args.eval_only and cfg.diagnostic.retrain, data=data)
    out = cfg.output
    write_csv(out.path(out.metrics), DIAGNOSTIC_COLUMNS, [report.row()])
    write_manifest(out.path(out.manifest), "shuffle-diag", cfg, dataset_hash(*data))
    print(
        f"{report.metric}: ordered {report.ordered!r} shuffled {report.shuffled!r} "
        f"drop {report.absolute_drop!r} (relative {report.relative_drop!r})"
    )
    return 0


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    train, test = make_dataset(cfg)
    out = cfg.output
    path = out.path("dataset.npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for split, data in (("train", train), ("test", test)):
        if cfg.dataset.kind == "temporal_order":
            arrays[f"{split}_X"], arrays[f"{split}_y"] = data.X, data.y
        else:
            arrays[f"{split}_images"] = data.images
            arrays[f"{split}_boxes"] = np.concatenate([b.reshape(-1, 5) for b in data.boxes])
            arrays[f"{split}_counts"] = np.array([len(b) for b in data.boxes])
    np.savez(path, **arrays)
    dhash = dataset_hash(train, test)
    write_manifest(out.path(out.manifest), "gen-data", cfg, dhash, {"file": path.name})
    print(f"{path} {dhash}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = load_config(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"snn3d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
        "shuffle-diag": cmd_shuffle_diag,
        "gen-data": cmd_gen_data,
    }
    try:
        return handlers[args.command](args, cfg)
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        print(f"snn3d: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
