"""Command-line entry point: ``classprune {train,score,prune,report,ablate}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch
from filelock import FileLock, Timeout

from . import architectures
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import load_dataset
from .forward import accuracy, init_weights
from .pipeline import REGULARIZER_VARIANTS, run_pipeline, run_regularizer_ablation, \
    run_strategy_comparison
from .reporting import (
    MissingArtifact, ablation_report, distribution_stats, regenerate, score_histogram,
    strategy_report, write_rows,
)
from .scoring import build_score_table
from .training import train

DEVICE_ENV = "CLASSPRUNE_DEVICE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message)
        sys.exit(2)


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _device() -> torch.device:
    name = os.environ.get(DEVICE_ENV, "cpu")
    try:
        dev = torch.device(name)
    except RuntimeError:
        raise CliError("device", f"{DEVICE_ENV}={name!r} is not a device name") from None
    if dev.type != "cpu":
        # weights are created and checkpointed on the host; only cpu is wired up
        raise CliError("device", f"{DEVICE_ENV}={name!r} is not supported, use 'cpu'")
    return dev


def _setup(args) -> tuple[RunConfig, object, object]:
    _device()
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.set_seed(args.seed)
    ds = load_dataset(cfg.data.dataset, cfg.data.root, cfg.data.subset, cfg.data.seed,
                      num_classes=cfg.model.num_classes)
    shape = tuple(cfg.model.input_shape or ds.input_shape)
    classes = cfg.model.num_classes or ds.num_classes
    if shape != ds.input_shape or classes != ds.num_classes:
        raise ConfigError([f"model expects input {shape} / {classes} classes but dataset "
                           f"{ds.name} provides {ds.input_shape} / {ds.num_classes}"])
    cfg.model.input_shape = list(shape)
    cfg.model.num_classes = classes
    if cfg.prune.class_score_threshold is None:
        cfg.prune.class_score_threshold = 0.3 * classes
    graph = architectures.build(cfg.model.architecture, shape, classes, cfg.model.width,
                                cfg.model.depth, cfg.model.batchnorm)
    return cfg, ds, graph


def _write_resolved(cfg: RunConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))


def cmd_train(args) -> None:
    cfg, ds, graph = _setup(args)
    run_dir = Path(cfg.output.run_dir)
    _write_resolved(cfg, run_dir)
    with FileLock(str(run_dir / ".lock"), timeout=0):
        w = train(graph, init_weights(graph, seed=cfg.train.seed), ds, cfg.train,
                  curve_path=run_dir / "baseline_curve.csv")
        acc = accuracy(graph, w, ds.x_val, ds.y_val)
        save_checkpoint(run_dir / "baseline.ckpt", graph, w, epoch=cfg.train.epochs,
                        config_hash=cfg.prune.digest(), accuracy=acc)
    print(json.dumps({"event": "trained", "accuracy": acc,
                      "checkpoint": str(run_dir / "baseline.ckpt")}))


def cmd_score(args) -> None:
    cfg, ds, _ = _setup(args)
    graph, weights, _ = load_checkpoint(args.checkpoint)
    table = build_score_table(graph, weights, ds, cfg.prune.samples_per_class,
                              cfg.prune.tau, cfg.train.seed,
                              max_then_average=cfg.prune.max_then_average)
    out = Path(args.out or Path(cfg.output.run_dir) / "scores")
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "scores.csv")
    hist = score_histogram(table)
    (out / "histogram.json").write_text(json.dumps(hist, indent=2))
    print(json.dumps({"event": "scored", "filters": len(table), "histogram": hist,
                      "scores": str(out / "scores.csv")}))


def cmd_prune(args) -> None:
    cfg, ds, graph = _setup(args)
    run_dir = Path(cfg.output.run_dir)
    weights = None
    if args.checkpoint:
        graph, weights, _ = load_checkpoint(args.checkpoint)

    def progress(line: str) -> None:
        print(line, flush=True)

    state = run_pipeline(ds, graph, cfg.train, cfg.prune, run_dir, weights=weights,
                         resolved_config=cfg.to_dict(), progress=progress)
    print(json.dumps({"event": "pruned", **{k: v for k, v in state.summary().items()
                                            if k != "layer_means"}}))


def cmd_report(args) -> None:
    result = regenerate(args.run_dir)
    print(json.dumps({"event": "report", **result}))


def cmd_ablate(args) -> None:
    cfg, ds, graph = _setup(args)
    run_dir = Path(cfg.output.run_dir)
    _write_resolved(cfg, run_dir)
    variants = args.variants.split(",")
    regs = [v for v in variants if v in REGULARIZER_VARIANTS]
    strategies = [v for v in variants if v not in REGULARIZER_VARIANTS]
    bad = [v for v in strategies
           if v not in ("percentage", "threshold", "percentage+threshold")]
    if bad:
        raise ConfigError([f"unknown variant {v!r}" for v in bad])

    def progress(line: str) -> None:
        print(line, flush=True)

    if regs:
        runs = run_regularizer_ablation(ds, graph, cfg.train, cfg.prune, regs, run_dir,
                                        prune=not args.no_prune, progress=progress)
        if args.no_prune:
            rows = [{"regularizer": k, "accuracy": r["accuracy"],
                     **distribution_stats(r["table"])} for k, r in runs.items()]
        else:
            rows = ablation_report(runs)
        write_rows(run_dir / "ablation.csv", rows)
        print(json.dumps({"event": "ablation", "rows": rows}))
    if strategies:
        runs = run_strategy_comparison(ds, graph, cfg.train, cfg.prune, strategies, run_dir,
                                       progress=progress)
        rows = strategy_report(runs)
        write_rows(run_dir / "strategy.csv", rows)
        print(json.dumps({"event": "strategy", "rows": rows}))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="classprune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the baseline network")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="class scores of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("prune", help="run the iterative pruning pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", help="start from this baseline instead of training")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("report", help="regenerate plots and summaries of a run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="regulariser or strategy comparison runs")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", default="none,l1+orth",
                   help="comma list from none,l1,orth,l1+orth,percentage,threshold,"
                        "percentage+threshold")
    p.add_argument("--no-prune", action="store_true",
                   help="regulariser variants: only train and score")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except ConfigError as err:
        _fail("validation", "; ".join(err.violations))
        return 2
    except CliError as err:
        _fail(err.kind, str(err))
        return err.code
    except MissingArtifact as err:
        # a run directory that lacks its artifacts is invalid input to ``report``
        _fail("validation", str(err))
        return 2
    except Timeout as err:
        _fail("locked", f"run directory is in use: {err}")
        return 1
    except FileNotFoundError as err:
        _fail("missing", str(err))
        return 1
    except Exception as err:  # noqa: BLE001 - surface as a single line
        _fail(type(err).__name__, str(err))
        return 1
    return 0


def _fail(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message.replace("\n", " ")}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
