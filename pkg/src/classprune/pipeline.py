"""Iterative score / prune / fine-tune loop with run-directory artifacts."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from filelock import FileLock

from .engine import PruneConfig, PruningPlan, flops_reduction, pruning_ratio, select_filters
from .checkpoint import save_checkpoint
from .forward import Weights, accuracy, clone_weights, init_weights, weights_digest
from .graph import ModelGraph, count_flops, count_params
from .reporting import layer_means, score_histogram
from .scoring import ClassScoreTable, build_score_table
from .surgery import apply_plan
from .training import TrainConfig, finetune, train

log = logging.getLogger(__name__)

EMPTY_PLAN = "empty_plan"
ACCURACY_UNRECOVERABLE = "accuracy_unrecoverable"
MAX_ITERATIONS = "max_iterations"


@dataclass
class IterationReport:
    iteration: int
    status: str  # accepted | empty_plan | reverted
    acc_before: float
    acc_pruned: float
    acc_after: float
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    removed: dict[int, int]
    histogram: dict
    layer_means: dict[int, float]

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "status": self.status,
            "acc_before": self.acc_before,
            "acc_pruned": self.acc_pruned,
            "acc_after": self.acc_after,
            "params": {"before": self.params_before, "after": self.params_after},
            "flops": {"before": self.flops_before, "after": self.flops_after},
            "removed": {str(k): v for k, v in self.removed.items()},
            "histogram": self.histogram,
            "layer_means": [{"layer_id": k, "mean_total": v} for k, v in self.layer_means.items()],
        }


@dataclass
class RunState:
    baseline_accuracy: float
    original_params: int
    original_flops: int
    graph: ModelGraph
    weights: Weights
    accuracy: float
    history: list[IterationReport] = field(default_factory=list)
    termination: str | None = None
    initial_table: ClassScoreTable | None = None
    final_table: ClassScoreTable | None = None

    @property
    def params(self) -> int:
        return count_params(self.graph)

    @property
    def flops(self) -> int:
        return count_flops(self.graph)

    def summary(self) -> dict:
        out = {
            "original_acc": self.baseline_accuracy,
            "pruned_acc": self.accuracy,
            "accuracy_drop_points": 100 * (self.baseline_accuracy - self.accuracy),
            "original_params": self.original_params,
            "pruned_params": self.params,
            "pruning_ratio": pruning_ratio(self.original_params, self.params),
            "original_flops": self.original_flops,
            "pruned_flops": self.flops,
            "flops_reduction": flops_reduction(self.original_flops, self.flops),
            "iterations": len(self.history),
            "termination": self.termination,
            "weights_sha256": weights_digest(self.weights),
        }
        if self.initial_table is not None and self.final_table is not None:
            pairs = layer_means(self.initial_table, self.final_table)
            grew = [p for p in pairs if p["after"] > p["before"]]
            out["layer_means"] = pairs
            out["mean_score_growth_fraction"] = len(grew) / len(pairs) if pairs else 0.0
        return out


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, default=str))


# -- main loop --------------------------------------------------------------------------

def run_pipeline(
    dataset,
    graph: ModelGraph,
    train_config: TrainConfig,
    prune_config: PruneConfig,
    run_dir=None,
    *,
    weights: Weights | None = None,
    finetune_epochs: int | None = None,
    resolved_config: dict | None = None,
    progress: Callable[[str], None] | None = None,
) -> RunState:
    """Train (unless ``weights`` is given), then prune iteratively.

    Each iteration scores every prunable filter, removes the selected
    filters and fine-tunes.  The run stops when the plan is empty, when
    fine-tuning cannot bring accuracy within ``accuracy_drop_budget``
    points of the baseline (the iteration is reverted), or after
    ``max_iterations``.
    """
    say = progress or log.info
    run_dir = Path(run_dir) if run_dir is not None else None
    lock = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(run_dir / ".lock"))
        lock.acquire(timeout=0)
    try:
        return _run(dataset, graph, train_config, prune_config, run_dir, weights,
                    finetune_epochs, resolved_config, say)
    finally:
        if lock is not None:
            lock.release()


def _run(dataset, graph, tcfg, pcfg, run_dir, weights, ft_epochs, resolved, say):
    cfg_hash = pcfg.digest()
    if run_dir is not None:
        _write_json(run_dir / "config.json", resolved or {
            "train": tcfg.to_dict(), "prune": pcfg.to_dict()})

    if weights is None:
        weights = init_weights(graph, seed=tcfg.seed)
        curve = run_dir / "baseline_curve.csv" if run_dir is not None else None
        weights = train(graph, weights, dataset, tcfg, curve_path=curve)
    base_acc = accuracy(graph, weights, dataset.x_val, dataset.y_val)
    say(f"baseline acc={base_acc:.4f} params={count_params(graph)} flops={count_flops(graph)}")
    if run_dir is not None:
        save_checkpoint(run_dir / "baseline.ckpt", graph, weights, epoch=tcfg.epochs,
                        config_hash=cfg_hash, accuracy=base_acc,
                        optimizer={"type": "sgd", "momentum": tcfg.momentum,
                                   "weight_decay": tcfg.weight_decay})

    state = RunState(base_acc, count_params(graph), count_flops(graph), graph,
                     clone_weights(weights), base_acc)
    budget = pcfg.accuracy_drop_budget
    current_table = None  # table scored on state.weights

    for it in range(1, pcfg.max_iterations + 1):
        table = build_score_table(state.graph, state.weights, dataset,
                                  pcfg.samples_per_class, pcfg.tau, tcfg.seed,
                                  max_then_average=pcfg.max_then_average)
        current_table = table
        if state.initial_table is None:
            state.initial_table = table
        plan = select_filters(table, state.graph, pcfg)
        hist = score_histogram(table)
        means = {k: float(table.layer_totals(k).mean()) for k in table.layer_ids()}
        p0, f0 = state.params, state.flops
        if not plan:
            rep = IterationReport(it, "empty_plan", state.accuracy, state.accuracy,
                                  state.accuracy, p0, p0, f0, f0, {}, hist, means)
            state.history.append(rep)
            state.termination = EMPTY_PLAN
            _save_iteration(run_dir, it, plan, table, rep, state.graph, state.weights, cfg_hash)
            say(f"iter {it}: no filter below threshold, stopping")
            break

        g2, w2 = apply_plan(state.graph, state.weights, plan, pcfg.min_filters_per_layer)
        acc_pruned = accuracy(g2, w2, dataset.x_val, dataset.y_val)
        curve = run_dir / f"iter_{it}" / "finetune_curve.csv" if run_dir is not None else None
        w3, acc = finetune(g2, w2, dataset, tcfg, epochs=ft_epochs, curve_path=curve)
        removed = {k: len(v) for k, v in plan.targets.items()}
        drop = 100 * (base_acc - acc)
        if drop > budget:
            rep = IterationReport(it, "reverted", state.accuracy, acc_pruned, acc, p0, p0,
                                  f0, f0, removed, hist, means)
            state.history.append(rep)
            state.termination = ACCURACY_UNRECOVERABLE
            _save_iteration(run_dir, it, plan, table, rep, state.graph, state.weights, cfg_hash)
            say(f"iter {it}: accuracy {acc:.4f} is {drop:.2f} points below baseline; "
                f"reverting and stopping")
            break

        rep = IterationReport(it, "accepted", state.accuracy, acc_pruned, acc, p0,
                              count_params(g2), f0, count_flops(g2), removed, hist, means)
        state.history.append(rep)
        state.graph, state.weights, state.accuracy = g2, w3, acc
        current_table = None
        _save_iteration(run_dir, it, plan, table, rep, g2, w3, cfg_hash)
        say(f"iter {it}: removed {plan.total_removed} filters, acc {acc_pruned:.4f} -> "
            f"{acc:.4f}, params {p0} -> {rep.params_after}, flops {f0} -> {rep.flops_after}")
    else:
        state.termination = MAX_ITERATIONS

    if current_table is None:
        current_table = build_score_table(state.graph, state.weights, dataset,
                                          pcfg.samples_per_class, pcfg.tau, tcfg.seed,
                                          max_then_average=pcfg.max_then_average)
    state.final_table = current_table
    if run_dir is not None:
        save_checkpoint(run_dir / "final" / "model.ckpt", state.graph, state.weights,
                        config_hash=cfg_hash, accuracy=state.accuracy)
        current_table.to_csv(run_dir / "final" / "scores.csv")
        _write_json(run_dir / "final" / "summary.json", state.summary())
    say(f"done ({state.termination}): acc {state.accuracy:.4f}, "
        f"pruning ratio {pruning_ratio(state.original_params, state.params):.3f}, "
        f"flops reduction {flops_reduction(state.original_flops, state.flops):.3f}")
    return state


def _save_iteration(run_dir, it, plan: PruningPlan, table, rep, graph, weights, cfg_hash):
    if run_dir is None:
        return
    d = run_dir / f"iter_{it}"
    d.mkdir(parents=True, exist_ok=True)
    plan.save(d / "plan.json")
    table.to_csv(d / "scores.csv")
    _write_json(d / "report.json", rep.to_json())
    save_checkpoint(d / "model.ckpt", graph, weights, config_hash=cfg_hash,
                    accuracy=rep.acc_after if rep.status == "accepted" else rep.acc_before)



# -- comparison runs ------------------------------------------------------------------

REGULARIZER_VARIANTS = {
    "none": (False, False),
    "l1": (True, False),
    "orth": (False, True),
    "l1+orth": (True, True),
}


def run_regularizer_ablation(dataset, graph, train_config: TrainConfig,
                             prune_config: PruneConfig, variants=("none", "l1+orth"),
                             run_dir=None, prune: bool = True, finetune_epochs=None,
                             progress=None) -> dict:
    """Train one network per regulariser variant from the same seed.

    Returns ``{variant: {"table": score table of the trained network,
    "summary": pruning summary or None}}``.
    """
    results = {}
    for name in variants:
        use_l1, use_orth = REGULARIZER_VARIANTS[name]
        cfg = replace(train_config,
                      lambda_l1=train_config.lambda_l1 if use_l1 else 0.0,
                      lambda_orth=train_config.lambda_orth if use_orth else 0.0)
        sub = Path(run_dir) / f"reg_{name.replace('+', '_')}" if run_dir is not None else None
        if prune:
            state = run_pipeline(dataset, graph, cfg, prune_config, sub,
                                 finetune_epochs=finetune_epochs, progress=progress)
            results[name] = {"table": state.initial_table, "summary": state.summary()}
        else:
            w = train(graph, init_weights(graph, seed=cfg.seed), dataset, cfg)
            table = build_score_table(graph, w, dataset, prune_config.samples_per_class,
                                      prune_config.tau, cfg.seed)
            if sub is not None:
                table.to_csv(sub / "scores.csv")
            results[name] = {"table": table, "summary": None,
                             "accuracy": accuracy(graph, w, dataset.x_val, dataset.y_val)}
    return results


def run_strategy_comparison(dataset, graph, train_config: TrainConfig,
                            prune_config: PruneConfig,
                            strategies=("percentage", "threshold", "percentage+threshold"),
                            run_dir=None, finetune_epochs=None, progress=None) -> dict:
    """Prune one shared baseline under each pruning strategy."""
    weights = train(graph, init_weights(graph, seed=train_config.seed), dataset, train_config)
    results = {}
    for name in strategies:
        cfg = replace(prune_config, strategy=name)
        sub = Path(run_dir) / f"strategy_{name.replace('+', '_')}" if run_dir else None
        state = run_pipeline(dataset, graph, train_config, cfg, sub, weights=weights,
                             finetune_epochs=finetune_epochs, progress=progress)
        results[name] = {"table": state.initial_table, "summary": state.summary()}
    return results
