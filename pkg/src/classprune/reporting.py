"""Score distributions, per-layer means, comparison tables and plots."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .engine import flops_reduction, pruning_ratio
from .graph import count_flops, count_params


class MissingArtifact(FileNotFoundError):
    pass


def score_histogram(table, num_classes: int | None = None) -> dict:
    """Counts of filter totals per integer bin.

    Bin ``k`` holds totals in ``[k, k+1)``; the last bin ``C`` holds totals
    equal to ``C``.  ``edges`` lists the lower edge of each bin.
    """
    c = table.num_classes if num_classes is None else num_classes
    totals = np.asarray(table.totals if hasattr(table, "totals") else table, dtype=np.float64)
    # totals are sums of k/M, so allow for rounding just below an integer
    bins = np.clip(np.floor(totals + 1e-9).astype(int), 0, c)
    counts = np.bincount(bins, minlength=c + 1)
    return {"edges": list(range(c + 1)), "counts": counts.tolist()}


def layer_means(before, after) -> list[dict]:
    """Mean total score per prunable layer for two score tables."""
    out = []
    for lid in before.layer_ids():
        b = before.layer_totals(lid)
        a = after.layer_totals(lid) if lid in after.layer_ids() else np.array([])
        out.append({
            "layer_id": lid,
            "before": float(b.mean()) if b.size else 0.0,
            "after": float(a.mean()) if a.size else 0.0,
            "filters_before": int(b.size),
            "filters_after": int(a.size),
        })
    return out


def distribution_stats(table) -> dict:
    totals = table.totals
    c = table.num_classes
    return {
        "filters": int(totals.size),
        "zero_fraction": float(np.mean(totals <= 1e-12)),
        "high_fraction": float(np.mean(totals >= 0.9 * c - 1e-9)),
        "mean_total": float(totals.mean()),
    }


def _comparison_rows(runs: dict, label: str) -> list[dict]:
    rows = []
    for name, run in runs.items():
        s = run["summary"] if "summary" in run else run
        row = {
            label: name,
            "original_acc": s["original_acc"],
            "pruned_acc": s["pruned_acc"],
            "drop_points": 100 * (s["original_acc"] - s["pruned_acc"]),
            "pruning_ratio": s["pruning_ratio"],
            "flops_reduction": s["flops_reduction"],
        }
        if run.get("table") is not None:
            row.update(distribution_stats(run["table"]))
        rows.append(row)
    return rows


def ablation_report(runs: dict) -> list[dict]:
    """One row per regulariser variant (``none``, ``l1``, ``orth``, ``l1+orth``).

    ``runs`` maps variant name to ``{"summary": ..., "table": ...}`` where
    ``table`` is the score table of the trained, unpruned network.
    """
    return _comparison_rows(runs, "regularizer")


def strategy_report(runs: dict) -> list[dict]:
    """One row per pruning strategy."""
    return _comparison_rows(runs, "strategy")


def write_rows(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# -- run-directory views --------------------------------------------------------------

def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing run artifact: {path}")
    return path


def iteration_dirs(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    dirs = [p for p in run_dir.glob("iter_*") if p.is_dir()]
    return sorted(dirs, key=lambda p: int(p.name.split("_")[1]))


def summary(run_dir) -> dict:
    """Table-I style record recomputed from the baseline and final checkpoints."""
    from .checkpoint import load_checkpoint

    run_dir = Path(run_dir)
    g0, _, b0 = load_checkpoint(_require(run_dir / "baseline.ckpt"))
    g1, _, b1 = load_checkpoint(_require(run_dir / "final" / "model.ckpt"))
    p0, p1 = count_params(g0), count_params(g1)
    f0, f1 = count_flops(g0), count_flops(g1)
    return {
        "original_acc": b0["accuracy"],
        "pruned_acc": b1["accuracy"],
        "pruning_ratio": pruning_ratio(p0, p1),
        "flops_reduction": flops_reduction(f0, f1),
        "original_params": p0,
        "pruned_params": p1,
        "original_flops": f0,
        "pruned_flops": f1,
    }


def _plot_histogram(hist: dict, title: str, stem: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(hist["edges"], hist["counts"], width=0.8, align="edge")
    ax.set_xlabel("total importance score")
    ax.set_ylabel("filters")
    ax.set_title(title)
    fig.tight_layout()
    for ext in ("svg", "png"):
        fig.savefig(stem.with_suffix(f".{ext}"))
    plt.close(fig)
    write_rows(stem.with_suffix(".csv"),
               [{"bin": e, "count": c} for e, c in zip(hist["edges"], hist["counts"])])


def _plot_layer_means(pairs: list[dict], stem: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    x = np.arange(len(pairs))
    ax.bar(x - 0.2, [p["before"] for p in pairs], 0.4, label="before")
    ax.bar(x + 0.2, [p["after"] for p in pairs], 0.4, label="after")
    ax.set_xticks(x, [str(p["layer_id"]) for p in pairs])
    ax.set_xlabel("layer")
    ax.set_ylabel("mean total score")
    ax.legend()
    fig.tight_layout()
    for ext in ("svg", "png"):
        fig.savefig(stem.with_suffix(f".{ext}"))
    plt.close(fig)
    write_rows(stem.with_suffix(".csv"), pairs)


def regenerate(run_dir) -> dict:
    """Rebuild plots and the summary from the artifacts in ``run_dir``."""
    from .scoring import ClassScoreTable

    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise MissingArtifact(f"missing run directory: {run_dir}")
    _require(run_dir / "config.json")
    iters = iteration_dirs(run_dir)
    if not iters:
        raise MissingArtifact(f"missing run artifact: {run_dir / 'iter_1'}")
    out_dir = run_dir / "reports"
    out_dir.mkdir(exist_ok=True)
    for d in iters:
        rep = json.loads(_require(d / "report.json").read_text())
        k = rep["iteration"]
        _plot_histogram(rep["histogram"], f"iteration {k}", out_dir / f"fig_scores_iter{k}")
    first = ClassScoreTable.from_csv(_require(iters[0] / "scores.csv"))
    last = ClassScoreTable.from_csv(_require(run_dir / "final" / "scores.csv"))
    _plot_histogram(score_histogram(last), "final", out_dir / "fig_scores_final")
    pairs = layer_means(first, last)
    _plot_layer_means(pairs, out_dir / "fig_layer_means")
    result = summary(run_dir)
    grew = sum(p["after"] > p["before"] for p in pairs)
    result["mean_score_growth_fraction"] = grew / len(pairs) if pairs else math.nan
    result["iterations"] = len(iters)
    (out_dir / "summary.json").write_text(json.dumps(result, indent=2))
    return result
