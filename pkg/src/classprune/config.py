"""JSON run configuration with every default materialised."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .engine import PruneConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


@dataclass
class ModelSection:
    architecture: str = "vgg6"
    width: float = 1.0
    depth: int | None = None
    batchnorm: bool = True
    input_shape: list[int] | None = None  # taken from the dataset when omitted
    num_classes: int | None = None

    def validate(self) -> list[str]:
        errors = []
        if not (self.architecture.startswith("vgg") or self.architecture.startswith("resnet")):
            errors.append(f"model.architecture {self.architecture!r} is not vgg* or resnet*")
        if self.width <= 0:
            errors.append("model.width must be > 0")
        if self.input_shape is not None and (len(self.input_shape) != 3
                                             or min(self.input_shape) < 1):
            errors.append("model.input_shape must be [channels, height, width]")
        if self.num_classes is not None and self.num_classes < 2:
            errors.append("model.num_classes must be >= 2")
        return errors


@dataclass
class DataSection:
    dataset: str = "digits"
    root: str | None = None
    subset: float = 1.0
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.dataset not in ("cifar10", "cifar100", "digits", "synthetic"):
            errors.append(f"data.dataset {self.dataset!r} is not one of "
                          "cifar10, cifar100, digits, synthetic")
        if not 0 < self.subset <= 1:
            errors.append("data.subset must be in (0, 1]")
        return errors


@dataclass
class OutputSection:
    run_dir: str = "run"

    def validate(self) -> list[str]:
        return [] if self.run_dir else ["output.run_dir must be non-empty"]


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def set_seed(self, seed: int) -> None:
        self.train.seed = seed
        self.data.seed = seed


SECTIONS = {
    "model": ModelSection, "data": DataSection, "train": TrainConfig,
    "prune": PruneConfig, "output": OutputSection,
}


def parse_config(doc: dict) -> RunConfig:
    """Build a :class:`RunConfig`, collecting every violation before raising."""
    errors: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a JSON object"])
    for key in doc:
        if key not in SECTIONS:
            errors.append(f"unknown section {key!r}")
    built = {}
    for name, cls in SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            errors.append(f"section {name!r} must be an object")
            section = {}
        known = {f.name for f in fields(cls)}
        for key in section:
            if key not in known:
                errors.append(f"unknown key {name}.{key}")
        try:
            built[name] = cls(**{k: v for k, v in section.items() if k in known})
        except TypeError as err:
            errors.append(f"section {name!r}: {err}")
            built[name] = cls()
    cfg = RunConfig(**built)
    for name in ("model", "data", "train", "output"):
        try:
            errors.extend(getattr(cfg, name).validate())
        except TypeError as err:
            errors.append(f"section {name!r} has a value of the wrong type: {err}")
    try:
        errors.extend(cfg.prune.validate(cfg.model.num_classes))
    except TypeError as err:
        errors.append(f"section 'prune' has a value of the wrong type: {err}")
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file {path} does not exist"])
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError([f"config file {path} is not valid JSON: {err}"]) from None
    return parse_config(doc)
