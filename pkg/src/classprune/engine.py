"""Turning score tables into pruning plans."""
from __future__ import annotations

import hashlib
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .graph import FilterKey, ModelGraph
from .scoring import DEFAULT_TAU, ClassScoreTable

STRATEGIES = ("percentage+threshold", "threshold", "percentage")


@dataclass
class PruneConfig:
    class_score_threshold: float | None = None  # None -> 0.3 * num_classes
    max_prune_fraction: float = 0.10
    accuracy_drop_budget: float = 1.0  # percentage points
    tau: float = DEFAULT_TAU
    samples_per_class: int = 10
    min_filters_per_layer: int = 1
    strategy: str = "percentage+threshold"
    max_iterations: int = 50
    max_then_average: bool = False

    def threshold(self, num_classes: int) -> float:
        if self.class_score_threshold is None:
            return 0.3 * num_classes
        return self.class_score_threshold

    def validate(self, num_classes: int | None = None) -> list[str]:
        errors = []
        if not 0 < self.max_prune_fraction <= 1:
            errors.append("prune.max_prune_fraction must be in (0, 1]")
        if self.accuracy_drop_budget < 0:
            errors.append("prune.accuracy_drop_budget must be >= 0")
        if self.tau < 0:
            errors.append("prune.tau must be >= 0")
        if self.samples_per_class < 1:
            errors.append("prune.samples_per_class must be >= 1")
        if self.min_filters_per_layer < 1:
            errors.append("prune.min_filters_per_layer must be >= 1")
        if self.strategy not in STRATEGIES:
            errors.append(f"prune.strategy must be one of {list(STRATEGIES)}")
        if self.max_iterations < 1:
            errors.append("prune.max_iterations must be >= 1")
        theta = self.class_score_threshold
        if theta is not None and (theta < 0 or (num_classes is not None and theta > num_classes)):
            errors.append(f"prune.class_score_threshold must be in [0, {num_classes}]")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class PruningPlan:
    targets: dict[int, list[int]] = field(default_factory=dict)
    scores: dict[FilterKey, float] = field(default_factory=dict)
    config_digest: str = ""
    table_digest: str = ""

    @property
    def total_removed(self) -> int:
        return sum(len(v) for v in self.targets.values())

    def __bool__(self) -> bool:
        return self.total_removed > 0

    def keys(self) -> list[FilterKey]:
        return [FilterKey(l, i) for l, idx in sorted(self.targets.items()) for i in idx]

    def to_dict(self) -> dict:
        return {
            "targets": {str(k): v for k, v in sorted(self.targets.items())},
            "total_removed": self.total_removed,
            "scores": {str(k): v for k, v in sorted(self.scores.items())},
            "config_digest": self.config_digest,
            "table_digest": self.table_digest,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        scores = {}
        for k, v in d.get("scores", {}).items():
            lid, idx = k.split(":")
            scores[FilterKey(int(lid), int(idx))] = v
        return cls(
            targets={int(k): list(v) for k, v in d["targets"].items()},
            scores=scores,
            config_digest=d.get("config_digest", ""),
            table_digest=d.get("table_digest", ""),
        )

    @classmethod
    def load(cls, path) -> "PruningPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def prune_cap(fraction: float, prunable: int) -> int:
    # tolerance keeps 0.1 * 30 from rounding up to 4
    return math.ceil(fraction * prunable - 1e-9)


def _canonical(value: float) -> float:
    # totals are sums of k/M in some order; equal sums can differ in the last
    # ulp, which would otherwise bypass the (layer, index) tie-break
    return float(f"{value:.12g}")


def select_filters(table: ClassScoreTable, graph: ModelGraph, config: PruneConfig) -> PruningPlan:
    """Pick the filters to remove in one iteration.

    Candidates are filters whose total score is below the class-score
    threshold.  At most ``ceil(max_prune_fraction * len(table))`` of them
    are kept, lowest total first (ties: layer id, then filter index).
    Totals are compared at 12 significant digits.  A
    layer that would drop below ``min_filters_per_layer`` gives back its
    highest-scoring targets.
    """
    if len(table) == 0:
        raise ValueError("score table is empty")
    totals = table.total_of()
    theta = _canonical(config.threshold(table.num_classes))
    canon = {k: _canonical(t) for k, t in totals.items()}
    ranked = sorted(canon.items(), key=lambda kv: (kv[1], kv[0].layer_id, kv[0].filter_index))
    cap = prune_cap(config.max_prune_fraction, len(table))
    if config.strategy == "threshold":
        chosen = [k for k, t in ranked if t < theta]
    elif config.strategy == "percentage":
        chosen = [k for k, _ in ranked[:cap]]
    else:
        chosen = [k for k, t in ranked if t < theta][:cap]

    by_layer: dict[int, list[FilterKey]] = defaultdict(list)
    for k in chosen:
        by_layer[k.layer_id].append(k)
    targets = {}
    for lid, keys in by_layer.items():
        allowed = graph[lid].out_channels - config.min_filters_per_layer
        # keys are in ascending-score order, so truncation drops the highest
        keys = keys[:max(allowed, 0)]
        if keys:
            targets[lid] = sorted(k.filter_index for k in keys)
    kept = {FilterKey(l, i) for l, idx in targets.items() for i in idx}
    return PruningPlan(
        targets=dict(sorted(targets.items())),
        scores={k: totals[k] for k in sorted(kept)},
        config_digest=config.digest(),
        table_digest=table.digest(),
    )


def pruning_ratio(original_params: int, current_params: int) -> float:
    return 1.0 - current_params / original_params if original_params else 0.0


def flops_reduction(original_flops: int, current_flops: int) -> float:
    return 1.0 - current_flops / original_flops if original_flops else 0.0
