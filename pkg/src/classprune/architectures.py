"""Builders for the supported network families."""
from __future__ import annotations

from .graph import LayerSpec, ModelGraph, StructuralError

VGG_CONFIGS = {
    "vgg6": [32, 32, "M", 64, 64, "M", 128, 128, "M"],
    "vgg11": [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "vgg16": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
              512, 512, 512, "M", 512, 512, 512, "M"],
    "vgg19": [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
              512, 512, 512, 512, "M", 512, 512, 512, 512, "M"],
}


class _Builder:
    def __init__(self):
        self.layers: list[LayerSpec] = []

    def add(self, kind, inputs=(), **kw) -> int:
        lid = len(self.layers)
        self.layers.append(LayerSpec(layer_id=lid, kind=kind, inputs=tuple(inputs), **kw))
        return lid


def vgg(cfg, input_shape=(3, 32, 32), num_classes=10, width: float = 1.0,
        hidden: int = 0, name: str = "vgg", batchnorm: bool = True) -> ModelGraph:
    """VGG-style chain: ``cfg`` lists conv widths with ``"M"`` for 2x2 max-pool.

    Every conv is followed by batchnorm (or a conv bias when
    ``batchnorm=False``) and ReLU, and is prunable.  Pools
    are skipped once the feature map is 1x1.
    """
    if isinstance(cfg, str):
        name = cfg
        try:
            cfg = VGG_CONFIGS[cfg]
        except KeyError:
            raise StructuralError(f"unknown VGG config {cfg!r}") from None
    b = _Builder()
    c, h, w = input_shape
    for item in cfg:
        if item == "M":
            if h >= 2 and w >= 2:
                b.add("pool", pool_type="max", kernel_size=(2, 2), stride=2)
                h, w = h // 2, w // 2
            continue
        out = max(1, int(round(item * width)))
        b.add("conv", in_channels=c, out_channels=out, kernel_size=(3, 3),
              padding=1, prunable=True, bias=not batchnorm)
        if batchnorm:
            b.add("batchnorm", out_channels=out)
        b.add("activation")
        c = out
    feat = c * h * w
    if hidden:
        b.add("fc", in_channels=feat, out_channels=hidden, bias=True)
        b.add("activation")
        feat = hidden
    b.add("fc", in_channels=feat, out_channels=num_classes, bias=True)
    return ModelGraph(tuple(b.layers), tuple(input_shape), num_classes, name=name)


def resnet(depth: int = 20, input_shape=(3, 32, 32), num_classes=10,
           width: int = 16, name: str | None = None) -> ModelGraph:
    """CIFAR ResNet with basic blocks (depth = 6n + 2).

    Shortcuts are identity within a stage and 1x1 conv + batchnorm
    projections across stages.  Only the first conv of each block is
    prunable.
    """
    if (depth - 2) % 6:
        raise StructuralError(f"ResNet depth must be 6n+2, got {depth}")
    n = (depth - 2) // 6
    b = _Builder()
    c = input_shape[0]
    b.add("conv", in_channels=c, out_channels=width, kernel_size=(3, 3), padding=1)
    b.add("batchnorm", out_channels=width)
    x = b.add("activation")
    c = width
    block = 0
    for stage, planes in enumerate((width, 2 * width, 4 * width)):
        for i in range(n):
            stride = 2 if stage > 0 and i == 0 else 1
            b.add("conv", inputs=(x,), in_channels=c, out_channels=planes,
                       kernel_size=(3, 3), stride=stride, padding=1, prunable=True,
                       block=block)
            b.add("batchnorm", out_channels=planes)
            b.add("activation")
            b.add("conv", in_channels=planes, out_channels=planes, kernel_size=(3, 3),
                  padding=1, block=block)
            main = b.add("batchnorm", out_channels=planes)
            if stride != 1 or c != planes:
                b.add("conv", inputs=(x,), in_channels=c, out_channels=planes,
                      kernel_size=(1, 1), stride=stride, block=block)
                short = b.add("batchnorm", out_channels=planes)
            else:
                short = x
            b.add("add", inputs=(main, short))
            x = b.add("activation")
            c = planes
            block += 1
    b.add("pool", pool_type="global")
    b.add("fc", in_channels=c, out_channels=num_classes, bias=True)
    return ModelGraph(tuple(b.layers), tuple(input_shape), num_classes,
                      name=name or f"resnet{depth}")


def build(arch: str, input_shape, num_classes: int, width: float = 1.0,
          depth: int | None = None, batchnorm: bool = True) -> ModelGraph:
    """Build a graph from a config-style architecture name."""
    if arch.startswith("vgg"):
        return vgg(arch, input_shape, num_classes, width=width, batchnorm=batchnorm)
    if arch.startswith("resnet"):
        d = depth or int(arch[len("resnet"):] or 20)
        return resnet(d, input_shape, num_classes, width=max(1, int(round(16 * width))))
    raise StructuralError(f"unknown architecture {arch!r}")
