"""Structural removal of filters from a graph and its weights."""
from __future__ import annotations

import dataclasses
from typing import Mapping

import torch

from .forward import Weights
from .graph import ModelGraph, StructuralError


def _as_targets(plan) -> dict[int, list[int]]:
    targets = getattr(plan, "targets", plan)
    return {int(k): sorted(int(i) for i in v) for k, v in targets.items() if len(v)}


def validate_plan(graph: ModelGraph, plan, min_filters: int = 1) -> dict[int, list[int]]:
    targets = _as_targets(plan)
    for lid, idx in targets.items():
        layer = graph[lid]
        if not layer.prunable:
            reason = (
                "only the first conv of a residual block is prunable"
                if layer.block is not None else "layer is not prunable"
            )
            raise StructuralError(f"plan targets layer {lid}: {reason}")
        if len(set(idx)) != len(idx):
            raise StructuralError(f"plan lists duplicate filters for layer {lid}")
        if idx[0] < 0 or idx[-1] >= layer.out_channels:
            raise StructuralError(
                f"plan targets filter {idx[-1]} of layer {lid} which has "
                f"{layer.out_channels} filters"
            )
        if layer.out_channels - len(idx) < min_filters:
            raise StructuralError(
                f"plan would leave layer {lid} with {layer.out_channels - len(idx)} "
                f"filters; each layer keeps at least {min_filters}"
            )
    return targets


def apply_plan(graph: ModelGraph, weights: Mapping[str, torch.Tensor], plan,
               min_filters: int = 1) -> tuple[ModelGraph, Weights]:
    """Remove the planned filters and every channel slice that depends on them.

    Returns a new graph and a new weight dict; the inputs are left
    untouched.  An empty plan returns equal copies.
    """
    targets = validate_plan(graph, plan, min_filters)
    new_w = {k: v.detach().clone() for k, v in weights.items()}
    layers = {l.layer_id: l for l in graph.layers}

    for lid, removed in targets.items():
        layer = layers[lid]
        gone = set(removed)
        keep = [i for i in range(layer.out_channels) if i not in gone]
        keep_t = torch.as_tensor(keep, dtype=torch.long)
        key = str(lid)
        new_w[f"{key}.weight"] = new_w[f"{key}.weight"][keep_t].clone()
        if f"{key}.bias" in new_w:
            new_w[f"{key}.bias"] = new_w[f"{key}.bias"][keep_t].clone()
        layers[lid] = dataclasses.replace(layer, out_channels=len(keep))

        deps = graph.consumers(lid)
        for cid in deps["channelwise"]:
            dep = layers[cid]
            if dep.kind == "batchnorm":
                for name in ("weight", "bias", "running_mean", "running_var"):
                    k = f"{cid}.{name}"
                    new_w[k] = new_w[k][keep_t].clone()
                layers[cid] = dataclasses.replace(dep, out_channels=len(keep))
        for cid in deps["input_slice"]:
            dep = layers[cid]
            k = f"{cid}.weight"
            if dep.kind == "conv":
                new_w[k] = new_w[k][:, keep_t].clone()
                layers[cid] = dataclasses.replace(dep, in_channels=dep.in_channels - len(removed))
            else:
                # fc input is the flattened (channel, h, w) map
                _, h, w = graph[cid].in_shape
                spatial = h * w
                cols = (keep_t[:, None] * spatial + torch.arange(spatial)).reshape(-1)
                new_w[k] = new_w[k][:, cols].clone()
                layers[cid] = dataclasses.replace(dep, in_channels=len(keep) * spatial)

    new_graph = graph.with_layers(layers[l.layer_id] for l in graph.layers)
    return new_graph, new_w
