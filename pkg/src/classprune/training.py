"""Training with cross-entropy plus L1 and kernel-orthogonality penalties."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .forward import Weights, accuracy, clone_weights, forward, trainable
from .graph import LayerSpec, ModelGraph
from .toeplitz import toeplitz_expand

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss and could not recover."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 256
    weight_decay: float = 0.0005
    momentum: float = 0.9
    lambda_l1: float = 0.0001
    lambda_orth: float = 0.01
    epochs: int = 30
    max_finetune_epochs: int = 130
    lr_drop_epochs: list[int] = field(default_factory=lambda: [80])
    lr_drop_factor: float = 0.1
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.lambda_l1 < 0:
            errors.append("train.lambda_l1 must be >= 0")
        if self.lambda_orth < 0:
            errors.append("train.lambda_orth must be >= 0")
        if self.learning_rate <= 0:
            errors.append("train.learning_rate must be > 0")
        if self.batch_size < 1:
            errors.append("train.batch_size must be >= 1")
        if self.epochs < 0:
            errors.append("train.epochs must be >= 0")
        if self.max_finetune_epochs < 1:
            errors.append("train.max_finetune_epochs must be >= 1")
        if not 0 <= self.momentum < 1:
            errors.append("train.momentum must be in [0, 1)")
        if self.weight_decay < 0:
            errors.append("train.weight_decay must be >= 0")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)


# -- regularisers -------------------------------------------------------------

def l1_term(graph: ModelGraph, weights: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Sum of absolute conv and fc weights (biases and batchnorm excluded)."""
    terms = [
        weights[f"{l.layer_id}.weight"].abs().sum()
        for l in graph.layers if l.kind in ("conv", "fc")
    ]
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()


def _shift_counts(n: int, stride: int, k: int) -> list[tuple[int, int]]:
    """(kernel shift, number of output-position pairs) along one axis."""
    out = []
    for d in range(-(n - 1), n):
        shift = d * stride
        if abs(shift) <= k - 1:
            out.append((shift, n - abs(d)))
    return out


def orth_layer(kernel: torch.Tensor, layer: LayerSpec) -> torch.Tensor:
    """||K K^T - I||_F for one conv via kernel self-correlation.

    K is the Toeplitz expansion of the conv over its zero-padded input
    grid, so no row is truncated and every entry of K K^T is a kernel
    cross-correlation at the shift between the two output positions.
    Each shift is weighted by the number of position pairs realising it.
    """
    o = kernel.shape[0]
    kh, kw = kernel.shape[2:]
    _, oh, ow = layer.out_shape
    # corr[a, b, kh-1+dy, kw-1+dx] = sum_c,u,v K[a,c,u,v] K[b,c,u+dy,v+dx]
    corr = F.conv2d(kernel, kernel, padding=(kh - 1, kw - 1))
    eye = torch.eye(o, dtype=kernel.dtype, device=kernel.device)
    total = kernel.new_zeros(())
    for dy, ny in _shift_counts(oh, layer.stride, kh):
        for dx, nx in _shift_counts(ow, layer.stride, kw):
            block = corr[:, :, kh - 1 + dy, kw - 1 + dx]
            if dy == 0 and dx == 0:
                block = block - eye
            total = total + ny * nx * (block * block).sum()
    positive = total > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, total, 1.0)), 0.0)


def orth_layer_explicit(kernel, layer: LayerSpec) -> float:
    """Same quantity through an explicit Toeplitz matrix (slow, for checking)."""
    _, h, w = layer.in_shape
    p = layer.padding
    mat = toeplitz_expand(kernel, (h + 2 * p, w + 2 * p), layer.stride, 0,
                          layer=layer.layer_id)
    gram = (mat @ mat.T).toarray()
    return float(np.linalg.norm(gram - np.eye(gram.shape[0])))


def orth_term(graph: ModelGraph, weights: Mapping[str, torch.Tensor]) -> torch.Tensor:
    terms = [orth_layer(weights[f"{l.layer_id}.weight"], l) for l in graph.conv_layers()]
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()


def total_loss(graph, weights, x, y, config: TrainConfig, training: bool = False,
               parts: dict | None = None) -> torch.Tensor:
    """Mean cross-entropy plus the weighted L1 and orthogonality terms."""
    if len(x) == 0:
        raise ValueError("empty batch")
    logits = forward(graph, weights, x, training=training)
    ce = F.cross_entropy(logits, y)
    loss = ce
    l1 = orth = None
    if config.lambda_l1:
        l1 = l1_term(graph, weights)
        loss = loss + config.lambda_l1 * l1
    if config.lambda_orth:
        orth = orth_term(graph, weights)
        loss = loss + config.lambda_orth * orth
    if parts is not None:
        parts["ce"] = ce.item()
        parts["l1"] = l1.item() if l1 is not None else 0.0
        parts["orth"] = orth.item() if orth is not None else 0.0
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()} (ce={ce.item()})")
    return loss


# -- optimisation ---------------------------------------------------------------

def _lr_at(config: TrainConfig, epoch: int, base_lr: float) -> float:
    drops = sum(1 for e in config.lr_drop_epochs if epoch >= e)
    return base_lr * config.lr_drop_factor ** drops


def _make_params(weights: Weights) -> Weights:
    out = clone_weights(weights)
    for k, v in trainable(out).items():
        v.requires_grad_(True)
    return out


def _run_epochs(graph, weights, dataset, config, epochs, *, base_lr, on_epoch=None,
                start_epoch=0):
    params = _make_params(weights)
    opt = torch.optim.SGD(
        list(trainable(params).values()), lr=base_lr, momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    gen = torch.Generator().manual_seed(config.seed)
    n = len(dataset.y_train)
    for epoch in range(start_epoch, start_epoch + epochs):
        for group in opt.param_groups:
            group["lr"] = _lr_at(config, epoch, base_lr)
        order = torch.randperm(n, generator=gen)
        sums = {"loss": 0.0, "ce": 0.0, "l1": 0.0, "orth": 0.0}
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:  # batchnorm needs more than one sample
                continue
            parts = {}
            loss = total_loss(graph, params, dataset.x_train[idx], dataset.y_train[idx],
                              config, training=True, parts=parts)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums["loss"] += loss.item()
            for k in ("ce", "l1", "orth"):
                sums[k] += parts[k]
            batches += 1
        stats = {k: v / max(batches, 1) for k, v in sums.items()}
        if on_epoch is not None:
            on_epoch(epoch, clone_weights(params), stats)
    return clone_weights(params)


def _train_loop(graph, weights, dataset, config, epochs, record):
    """Run ``epochs`` epochs; on divergence resume once from the last finite
    epoch with half the learning rate."""
    last = {"weights": clone_weights(weights), "epoch": 0}

    def on_epoch(epoch, w, stats):
        last["weights"], last["epoch"] = w, epoch + 1
        record(epoch, w, stats)

    try:
        return _run_epochs(graph, weights, dataset, config, epochs,
                           base_lr=config.learning_rate, on_epoch=on_epoch)
    except DivergenceError as err:
        log.warning("training diverged at epoch %d (%s); resuming with lr %.3g",
                    last["epoch"], err, config.learning_rate / 2)
    try:
        return _run_epochs(graph, last["weights"], dataset, config, epochs - last["epoch"],
                           base_lr=config.learning_rate / 2, on_epoch=on_epoch,
                           start_epoch=last["epoch"])
    except DivergenceError as err:
        raise DivergenceError(f"training diverged twice: {err}") from err


def _curve_row(graph, dataset, epoch, w, stats):
    return {"epoch": epoch, "train_loss": stats["loss"],
            "val_acc": accuracy(graph, w, dataset.x_val, dataset.y_val),
            "l1": stats["l1"], "orth": stats["orth"]}


def train(graph, weights, dataset, config: TrainConfig, epochs: int | None = None,
          curve_path: Path | None = None) -> Weights:
    """Train from ``weights`` for ``epochs`` epochs; returns new weights."""
    epochs = config.epochs if epochs is None else epochs
    if epochs == 0:
        return clone_weights(weights)
    rows = []

    def record(epoch, w, stats):
        rows.append(_curve_row(graph, dataset, epoch, w, stats))
        log.debug("epoch %d loss %.4f val_acc %.4f", epoch, stats["loss"], rows[-1]["val_acc"])

    out = _train_loop(graph, weights, dataset, config, epochs, record)
    if curve_path is not None:
        write_curve(curve_path, rows)
    return out


def finetune(graph, weights, dataset, config: TrainConfig, epochs: int | None = None,
             curve_path: Path | None = None) -> tuple[Weights, float]:
    """Fine-tune and return the best-validation-accuracy weights and that accuracy.

    The starting weights count as a candidate, so the result never scores
    below the input on the validation split.
    """
    epochs = config.max_finetune_epochs if epochs is None else epochs
    best = {"acc": accuracy(graph, weights, dataset.x_val, dataset.y_val),
            "weights": clone_weights(weights)}
    rows = []

    def record(epoch, w, stats):
        rows.append(_curve_row(graph, dataset, epoch, w, stats))
        if rows[-1]["val_acc"] > best["acc"]:
            best["acc"], best["weights"] = rows[-1]["val_acc"], w

    if epochs > 0:
        _train_loop(graph, weights, dataset, config, epochs, record)
    if curve_path is not None:
        write_curve(curve_path, rows)
    return best["weights"], best["acc"]


def write_curve(path: Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, ["epoch", "train_loss", "val_acc", "l1", "orth"])
        writer.writeheader()
        writer.writerows(rows)

