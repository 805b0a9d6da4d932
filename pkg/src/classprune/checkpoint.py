"""Checkpoint files: graph description, weights and bookkeeping."""
from __future__ import annotations

from pathlib import Path

import torch

from .forward import Weights
from .graph import ModelGraph


def save_checkpoint(path, graph: ModelGraph, weights: Weights, *, epoch: int = 0,
                    config_hash: str = "", accuracy: float | None = None,
                    optimizer: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "graph": graph.to_dict(),
        "weights": {k: v.detach().cpu() for k, v in weights.items()},
        "epoch": epoch,
        "config_hash": config_hash,
        "accuracy": accuracy,
        "optimizer": optimizer or {},
    }, path)


def load_checkpoint(path) -> tuple[ModelGraph, Weights, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    blob = torch.load(path, weights_only=True)
    return ModelGraph.from_dict(blob["graph"]), blob["weights"], blob
