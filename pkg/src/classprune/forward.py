"""Functional execution of a :class:`ModelGraph` over a flat weight dict."""
from __future__ import annotations

import hashlib
import math
from typing import Callable, Mapping

import torch
import torch.nn.functional as F

from .graph import ModelGraph

Weights = dict[str, torch.Tensor]
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def init_weights(graph: ModelGraph, seed: int = 0, dtype=torch.float32) -> Weights:
    """Kaiming-normal convs, uniform fc, unit batchnorm."""
    gen = torch.Generator().manual_seed(seed)
    w: Weights = {}
    for l in graph.layers:
        key = str(l.layer_id)
        if l.kind == "conv":
            kh, kw = l.kernel_size
            fan_out = l.out_channels * kh * kw
            std = math.sqrt(2.0 / fan_out)
            w[f"{key}.weight"] = torch.randn(
                l.out_channels, l.in_channels, kh, kw, generator=gen, dtype=dtype) * std
            if l.bias:
                w[f"{key}.bias"] = torch.zeros(l.out_channels, dtype=dtype)
        elif l.kind == "fc":
            bound = 1.0 / math.sqrt(l.in_channels)
            w[f"{key}.weight"] = (torch.rand(
                l.out_channels, l.in_channels, generator=gen, dtype=dtype) * 2 - 1) * bound
            if l.bias:
                w[f"{key}.bias"] = (torch.rand(
                    l.out_channels, generator=gen, dtype=dtype) * 2 - 1) * bound
        elif l.kind == "batchnorm":
            c = l.out_channels
            w[f"{key}.weight"] = torch.ones(c, dtype=dtype)
            w[f"{key}.bias"] = torch.zeros(c, dtype=dtype)
            w[f"{key}.running_mean"] = torch.zeros(c, dtype=dtype)
            w[f"{key}.running_var"] = torch.ones(c, dtype=dtype)
    return w


def is_buffer(name: str) -> bool:
    return name.endswith(("running_mean", "running_var"))


def trainable(weights: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {k: v for k, v in weights.items() if not is_buffer(k)}


def clone_weights(weights: Mapping[str, torch.Tensor], dtype=None) -> Weights:
    out = {}
    for k, v in weights.items():
        t = v.detach().clone()
        out[k] = t.to(dtype) if dtype is not None else t
    return out


def weights_digest(weights: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(weights):
        h.update(k.encode())
        h.update(weights[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def forward(
    graph: ModelGraph,
    weights: Mapping[str, torch.Tensor],
    x: torch.Tensor,
    *,
    training: bool = False,
    edits: Mapping[int, Callable[[torch.Tensor], torch.Tensor]] | None = None,
    taps: dict[int, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Run the graph on a batch ``x`` of shape ``[N, C, H, W]``; returns logits.

    ``edits`` maps a layer id to a function applied to that layer's output
    before it is passed on (used for masking).  ``taps`` is filled with the
    (edited) outputs of the requested layer ids.
    """
    edits = edits or {}
    outputs: dict[int, torch.Tensor] = {-1: x}
    y = x
    for l in graph.layers:
        key = str(l.layer_id)
        h = outputs[l.inputs[0]]
        if l.kind == "conv":
            y = F.conv2d(h, weights[f"{key}.weight"], weights.get(f"{key}.bias"),
                         stride=l.stride, padding=l.padding)
        elif l.kind == "batchnorm":
            y = F.batch_norm(
                h, weights[f"{key}.running_mean"], weights[f"{key}.running_var"],
                weights[f"{key}.weight"], weights[f"{key}.bias"],
                training=training, momentum=BN_MOMENTUM, eps=BN_EPS,
            )
        elif l.kind == "activation":
            y = F.relu(h)
        elif l.kind == "pool":
            if l.pool_type == "global":
                y = h.mean(dim=(2, 3), keepdim=True)
            elif l.pool_type == "max":
                y = F.max_pool2d(h, l.kernel_size, l.stride)
            else:
                y = F.avg_pool2d(h, l.kernel_size, l.stride)
        elif l.kind == "fc":
            y = F.linear(h.flatten(1), weights[f"{key}.weight"], weights.get(f"{key}.bias"))
        else:  # add
            y = h + outputs[l.inputs[1]]
        if l.layer_id in edits:
            y = edits[l.layer_id](y)
        if taps is not None and l.layer_id in taps:
            taps[l.layer_id] = y
        outputs[l.layer_id] = y
    return y.flatten(1)


def channel_mask_edits(graph: ModelGraph, removed: Mapping[int, list[int]]):
    """Edits that zero the activation maps of the given filters."""
    edits = {}
    for conv_id, idx in removed.items():
        if not idx:
            continue
        site = graph.activation_site(conv_id)
        index = torch.as_tensor(list(idx), dtype=torch.long)

        def _zero(y, index=index):
            y = y.clone()
            y[:, index] = 0
            return y

        edits[site] = _zero
    return edits


@torch.no_grad()
def predict(graph: ModelGraph, weights, x: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    preds = []
    for start in range(0, len(x), batch_size):
        logits = forward(graph, weights, x[start:start + batch_size])
        preds.append(logits.argmax(1))
    return torch.cat(preds) if preds else torch.empty(0, dtype=torch.long)


def accuracy(graph: ModelGraph, weights, x: torch.Tensor, y: torch.Tensor) -> float:
    if len(y) == 0:
        return 0.0
    return (predict(graph, weights, x) == y).double().mean().item()
