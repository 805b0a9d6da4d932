"""Class-conditional filter importance from activation sensitivities."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .forward import clone_weights, forward
from .graph import FilterKey, ModelGraph

DEFAULT_TAU = 1e-50


class ScoringError(RuntimeError):
    pass


@dataclass
class ClassScoreTable:
    """Per-(filter, class) scores in [0, 1]; one row per prunable filter."""

    keys: list[FilterKey]
    scores: np.ndarray  # [filters, classes]
    samples_per_class: int

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape[0] != len(self.keys):
            raise ValueError("one score row per filter key is required")
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("duplicate filter keys in score table")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    @property
    def totals(self) -> np.ndarray:
        return self.scores.sum(axis=1)

    def __len__(self) -> int:
        return len(self.keys)

    def layer_ids(self) -> list[int]:
        return sorted({k.layer_id for k in self.keys})

    def layer_totals(self, layer_id: int) -> np.ndarray:
        rows = [i for i, k in enumerate(self.keys) if k.layer_id == layer_id]
        return self.totals[rows]

    def total_of(self) -> dict[FilterKey, float]:
        return dict(zip(self.keys, self.totals.tolist()))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr([(k.layer_id, k.filter_index) for k in self.keys]).encode())
        h.update(np.ascontiguousarray(self.scores).tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer_id", "filter_index"]
                            + [f"class_{c}" for c in range(self.num_classes)] + ["total"])
            for key, row, total in zip(self.keys, self.scores, self.totals):
                writer.writerow([key.layer_id, key.filter_index]
                                + [repr(float(v)) for v in row] + [repr(float(total))])

    @classmethod
    def from_csv(cls, path, samples_per_class: int = 0) -> "ClassScoreTable":
        keys, rows = [], []
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            ncls = sum(1 for h in header if h.startswith("class_"))
            for rec in reader:
                keys.append(FilterKey(int(rec[0]), int(rec[1])))
                rows.append([float(v) for v in rec[2:2 + ncls]])
        return cls(keys, np.array(rows).reshape(len(keys), ncls), samples_per_class)


# -- per-activation sensitivities ---------------------------------------------

def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def _as_labels(y, n: int) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    return y.expand(n) if y.numel() == 1 else y


def _summed_ce(logits, y):
    return F.cross_entropy(logits, y, reduction="sum")


def exact_sensitivity(graph: ModelGraph, weights, x, y, key: FilterKey, index: int,
                      extra_loss: float | torch.Tensor = 0.0, loss_fn=_summed_ce) -> float:
    """|L(x) - L(x; a <- 0)| for a single activation of filter ``key``.

    ``index`` addresses the flattened spatial map of the filter's
    post-nonlinearity output.  ``extra_loss`` is an activation-independent
    term added to both losses (regularisers).  ``loss_fn(logits, y)``
    defaults to cross-entropy summed over the batch.
    """
    layer = graph[key.layer_id]
    if not layer.prunable:
        raise IndexError(f"layer {key.layer_id} has no scored filters")
    _, h, w = layer.out_shape
    if not 0 <= key.filter_index < layer.out_channels or not 0 <= index < h * w:
        raise IndexError(f"activation ({key}, {index}) out of range")
    x = _as_batch(x)
    y = _as_labels(y, len(x))
    site = graph.activation_site(key.layer_id)

    def zero_one(a):
        a = a.clone()
        a.view(a.shape[0], a.shape[1], -1)[:, key.filter_index, index] = 0
        return a

    with torch.no_grad():
        base = loss_fn(forward(graph, weights, x), y) + extra_loss
        masked = loss_fn(forward(graph, weights, x, edits={site: zero_one}), y) + extra_loss
    return float(abs(base - masked))


def taylor_scores(graph: ModelGraph, weights, x, y, extra_loss=None,
                  loss_fn=_summed_ce) -> dict[int, torch.Tensor]:
    """|a * dL/da| for every activation of every prunable filter.

    One forward and one backward pass over the batch.  The loss is summed
    over samples, so each sample's activation gradient is its own.
    Returns ``{conv_id: tensor[N, filters, Z]}``.  ``extra_loss`` is an
    optional callable ``weights -> scalar`` added to the loss.
    """
    x = _as_batch(x)
    y = _as_labels(y, len(x))
    sites = {graph.activation_site(l.layer_id): l.layer_id for l in graph.prunable_layers()}
    taps: dict[int, torch.Tensor] = {s: None for s in sites}
    with torch.enable_grad():
        # input requires grad so every activation is part of the autograd graph
        xg = x.detach().requires_grad_(True)
        logits = forward(graph, weights, xg, taps=taps)
        loss = loss_fn(logits, y)
        if extra_loss is not None:
            loss = loss + extra_loss(weights)
        acts = [taps[s] for s in sites]
        grads = torch.autograd.grad(loss, acts, allow_unused=True)
    out = {}
    for (site, conv_id), a, g in zip(sites.items(), acts, grads):
        if g is None:
            g = torch.zeros_like(a)
        if not torch.isfinite(g).all():
            raise ScoringError(f"non-finite activation gradients at layer {conv_id}")
        out[conv_id] = (a.detach() * g).abs().flatten(2)
    return out


def binarize(theta, tau: float = DEFAULT_TAU):
    """1 where the Taylor score strictly exceeds ``tau``, else 0."""
    if isinstance(theta, torch.Tensor):
        return (theta > tau).to(torch.int64)
    if np.isscalar(theta):
        return int(theta > tau)
    return (np.asarray(theta) > tau).astype(np.int64)


def average_indicators(indicators):
    """Mean over the image axis (axis 0) of 0/1 indicators."""
    arr = np.asarray(indicators.cpu() if isinstance(indicators, torch.Tensor) else indicators)
    m = arr.shape[0]
    return arr.sum(axis=0) / m


def filter_class_score(s_ave) -> float:
    """Filter score for one class: the maximum over its activation positions."""
    arr = np.asarray(s_ave, dtype=np.float64).reshape(-1)
    return float(arr.max()) if arr.size else 0.0


# -- table construction -----------------------------------------------------------

def select_class_samples(labels, cls: int, m: int, seed: int) -> np.ndarray:
    """``m`` distinct training indices with label ``cls``, drawn reproducibly."""
    labels = np.asarray(labels)
    idx = np.flatnonzero(labels == cls)
    if len(idx) < m:
        raise ScoringError(f"class {cls} has {len(idx)} training samples, need {m}")
    rng = np.random.default_rng([seed, cls])
    return np.sort(rng.choice(idx, size=m, replace=False))


def build_score_table(graph: ModelGraph, weights: Mapping[str, torch.Tensor], dataset,
                      samples_per_class: int = 10, tau: float = DEFAULT_TAU, seed: int = 0,
                      dtype=torch.float64, max_then_average: bool = False) -> ClassScoreTable:
    """Score every prunable filter against every class.

    Per class: pick ``samples_per_class`` training images, compute Taylor
    scores, binarise at ``tau``, average over images and take the maximum
    over activation positions.  Runs in ``dtype`` (float64 by default so
    that tiny thresholds are representable).
    """
    w = clone_weights(weights, dtype=dtype)
    keys = graph.filter_keys()
    row_of = {k: i for i, k in enumerate(keys)}
    labels = dataset.y_train.numpy()
    scores = np.zeros((len(keys), graph.num_classes))
    m = samples_per_class
    for cls in range(graph.num_classes):
        idx = select_class_samples(labels, cls, m, seed)
        x = dataset.x_train[idx].to(dtype)
        y = dataset.y_train[idx]
        theta = taylor_scores(graph, w, x, y)
        for cid, t in theta.items():
            ind = binarize(t, tau).numpy()  # [m, filters, Z]
            if max_then_average:
                per_filter = ind.max(axis=2).sum(axis=0) / m
            else:
                per_filter = ind.sum(axis=0).max(axis=1) / m
            for f, value in enumerate(per_filter):
                scores[row_of[FilterKey(cid, f)], cls] = value
    return ClassScoreTable(keys, scores, m)
