"""Layer graph for plain CNNs and CIFAR-style ResNets.

A :class:`ModelGraph` is an immutable, ordered list of :class:`LayerSpec`
records plus the input shape and class count.  Weights live outside the
graph in a flat ``dict[str, Tensor]`` keyed ``"<layer_id>.<name>"`` so that
structural edits can be expressed as pure functions returning a new
``(graph, weights)`` pair.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterable

KINDS = ("conv", "batchnorm", "activation", "pool", "fc", "add")
TRANSPARENT = ("batchnorm", "activation", "pool")


class StructuralError(ValueError):
    """Raised when a graph, plan or kernel has inconsistent dimensions."""


@dataclass(frozen=True, order=True)
class FilterKey:
    layer_id: int
    filter_index: int

    def __str__(self) -> str:
        return f"{self.layer_id}:{self.filter_index}"


@dataclass(frozen=True)
class LayerSpec:
    layer_id: int
    kind: str
    # producer layer ids; -1 is the network input, () means "previous layer"
    inputs: tuple[int, ...] = ()
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    bias: bool = False
    pool_type: str = "max"  # max | avg | global
    prunable: bool = False
    block: int | None = None
    # resolved by ModelGraph: (channels, height, width) of the output
    out_shape: tuple[int, int, int] | None = None
    in_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructuralError(f"layer {self.layer_id}: unknown kind {self.kind!r}")
        if self.prunable and self.kind != "conv":
            raise StructuralError(f"layer {self.layer_id}: only conv layers can be prunable")


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    num_classes: int
    name: str = "custom"
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        layers = tuple(self._normalise_inputs(self.layers))
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "_index", {l.layer_id: i for i, l in enumerate(layers)})
        if len(self._index) != len(layers):
            raise StructuralError("duplicate layer ids")
        object.__setattr__(self, "layers", tuple(self._resolve_shapes()))
        self._check_prunability()

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _normalise_inputs(layers: Iterable[LayerSpec]):
        prev = -1
        for layer in layers:
            if not layer.inputs:
                layer = dataclasses.replace(layer, inputs=(prev,))
            prev = layer.layer_id
            yield layer

    def _resolve_shapes(self):
        shapes: dict[int, tuple[int, int, int]] = {-1: self.input_shape}
        out = []
        for layer in self.layers:
            for src in layer.inputs:
                if src not in shapes:
                    raise StructuralError(
                        f"layer {layer.layer_id}: input {src} is not an earlier layer"
                    )
            in_shape = shapes[layer.inputs[0]]
            c, h, w = in_shape
            k = layer.kind
            if k == "conv":
                if layer.in_channels != c:
                    raise StructuralError(
                        f"layer {layer.layer_id}: conv expects {layer.in_channels} input "
                        f"channels but receives {c}"
                    )
                kh, kw = layer.kernel_size
                oh = (h + 2 * layer.padding - kh) // layer.stride + 1
                ow = (w + 2 * layer.padding - kw) // layer.stride + 1
                if oh < 1 or ow < 1 or layer.stride < 1:
                    raise StructuralError(
                        f"layer {layer.layer_id}: kernel {kh}x{kw} does not fit input {h}x{w}"
                    )
                shape = (layer.out_channels, oh, ow)
            elif k == "batchnorm":
                if layer.out_channels != c:
                    raise StructuralError(
                        f"layer {layer.layer_id}: batchnorm has {layer.out_channels} "
                        f"channels but receives {c}"
                    )
                shape = in_shape
            elif k == "activation":
                shape = in_shape
            elif k == "pool":
                if layer.pool_type == "global":
                    shape = (c, 1, 1)
                else:
                    kh, kw = layer.kernel_size
                    s = layer.stride
                    shape = (c, (h - kh) // s + 1, (w - kw) // s + 1)
                    if shape[1] < 1 or shape[2] < 1:
                        raise StructuralError(f"layer {layer.layer_id}: pool too large")
            elif k == "fc":
                flat = c * h * w
                if layer.in_channels != flat:
                    raise StructuralError(
                        f"layer {layer.layer_id}: fc expects {layer.in_channels} features "
                        f"but receives {flat}"
                    )
                shape = (layer.out_channels, 1, 1)
            else:  # add
                others = [shapes[s] for s in layer.inputs]
                if len(others) != 2 or others[0] != others[1]:
                    raise StructuralError(
                        f"layer {layer.layer_id}: add operands have shapes {others}"
                    )
                shape = in_shape
            shapes[layer.layer_id] = shape
            out.append(dataclasses.replace(layer, in_shape=in_shape, out_shape=shape))
        return out

    def _check_prunability(self):
        blocks: dict[int, list[LayerSpec]] = {}
        for layer in self.layers:
            if layer.kind == "conv" and layer.block is not None:
                blocks.setdefault(layer.block, []).append(layer)
        for block, convs in blocks.items():
            for conv in convs[1:]:
                if conv.prunable:
                    raise StructuralError(
                        f"layer {conv.layer_id}: only the first conv of residual block "
                        f"{block} may be prunable"
                    )
        for layer in self.prunable_layers():
            self.consumers(layer.layer_id)

    # -- queries --------------------------------------------------------------
    def __getitem__(self, layer_id: int) -> LayerSpec:
        try:
            return self.layers[self._index[layer_id]]
        except KeyError:
            raise StructuralError(f"no layer with id {layer_id}") from None

    def __len__(self) -> int:
        return len(self.layers)

    def successors(self, layer_id: int) -> list[LayerSpec]:
        return [l for l in self.layers if layer_id in l.inputs]

    def prunable_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.prunable]

    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    def filter_keys(self) -> list[FilterKey]:
        return [
            FilterKey(l.layer_id, f)
            for l in self.prunable_layers()
            for f in range(l.out_channels)
        ]

    def consumers(self, layer_id: int) -> dict[str, list[int]]:
        """Layers touched when output channels of ``layer_id`` are removed.

        Returns ``{"channelwise": [...], "input_slice": [...]}`` where the
        first list holds channel-transparent layers (batchnorm, activation,
        pool) and the second holds convs and fc layers whose input slices
        shrink.
        """
        channelwise: list[int] = []
        sliced: list[int] = []
        frontier = [layer_id]
        seen = set()
        while frontier:
            current = frontier.pop()
            for succ in self.successors(current):
                if succ.layer_id in seen:
                    continue
                seen.add(succ.layer_id)
                if succ.kind in TRANSPARENT:
                    channelwise.append(succ.layer_id)
                    frontier.append(succ.layer_id)
                elif succ.kind in ("conv", "fc"):
                    sliced.append(succ.layer_id)
                else:
                    raise StructuralError(
                        f"layer {layer_id}: output channels reach add-junction "
                        f"{succ.layer_id}; pruning it would break the shortcut"
                    )
        if not sliced and self[layer_id].kind == "conv":
            raise StructuralError(f"layer {layer_id}: output has no consumer")
        return {"channelwise": sorted(channelwise), "input_slice": sorted(sliced)}

    def activation_site(self, conv_id: int) -> int:
        """Id of the layer whose output is the conv's post-nonlinearity map.

        Follows the single-successor chain through batchnorm until an
        activation layer.  Falls back to the last layer of the chain.
        """
        site = conv_id
        while True:
            succ = self.successors(site)
            if len(succ) != 1 or succ[0].kind not in ("batchnorm", "activation"):
                return site
            site = succ[0].layer_id
            if succ[0].kind == "activation":
                return site

    # -- serialisation ----------------------------------------------------------
    def to_dict(self) -> dict:
        layers = []
        for l in self.layers:
            d = dataclasses.asdict(l)
            d["inputs"] = list(l.inputs)
            d["kernel_size"] = list(l.kernel_size)
            d["out_shape"] = list(l.out_shape) if l.out_shape else None
            d["in_shape"] = list(l.in_shape) if l.in_shape else None
            layers.append(d)
        edges = {
            str(l.layer_id): self.consumers(l.layer_id) for l in self.prunable_layers()
        }
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": layers,
            "edges": edges,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            ld.pop("out_shape", None)
            ld.pop("in_shape", None)
            ld["inputs"] = tuple(ld["inputs"])
            ld["kernel_size"] = tuple(ld["kernel_size"])
            layers.append(LayerSpec(**ld))
        return cls(
            layers=tuple(layers),
            input_shape=tuple(d["input_shape"]),
            num_classes=d["num_classes"],
            name=d.get("name", "custom"),
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelGraph":
        return cls.from_dict(json.loads(text))

    def with_layers(self, layers: Iterable[LayerSpec]) -> "ModelGraph":
        return ModelGraph(
            layers=tuple(layers),
            input_shape=self.input_shape,
            num_classes=self.num_classes,
            name=self.name,
        )


def count_flops(graph: ModelGraph) -> int:
    """Floating-point operations of one forward pass, 2 FLOPs per MAC.

    Only conv and fc layers are counted.
    """
    total = 0
    for l in graph.layers:
        if l.out_shape is None:
            raise StructuralError(f"layer {l.layer_id}: unresolved spatial dims")
        if l.kind == "conv":
            kh, kw = l.kernel_size
            _, oh, ow = l.out_shape
            total += 2 * kh * kw * l.in_channels * l.out_channels * oh * ow
        elif l.kind == "fc":
            total += 2 * l.in_channels * l.out_channels
    return total


def count_params(graph: ModelGraph) -> int:
    """Weight and bias elements, including batchnorm scale and shift."""
    total = 0
    for l in graph.layers:
        if l.kind == "conv":
            kh, kw = l.kernel_size
            total += l.out_channels * l.in_channels * kh * kw
            total += l.out_channels if l.bias else 0
        elif l.kind == "fc":
            total += l.out_channels * l.in_channels
            total += l.out_channels if l.bias else 0
        elif l.kind == "batchnorm":
            total += 2 * l.out_channels
    return total
