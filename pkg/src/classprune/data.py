"""Dataset loading: CIFAR-10/100 from local files, sklearn digits, synthetic."""
from __future__ import annotations

import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


@dataclass
class Dataset:
    x_train: torch.Tensor
    y_train: torch.Tensor
    x_val: torch.Tensor
    y_val: torch.Tensor
    num_classes: int
    name: str = "custom"

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])


def _stratified_subset(y: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if fraction >= 1.0:
        return np.arange(len(y))
    keep = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        n = max(1, int(round(fraction * len(idx))))
        keep.append(rng.choice(idx, size=n, replace=False))
    return np.sort(np.concatenate(keep))


def _standardise(x_train: np.ndarray, x_val: np.ndarray):
    mean = x_train.mean(axis=(0, 2, 3), keepdims=True)
    std = x_train.std(axis=(0, 2, 3), keepdims=True) + 1e-8
    return (x_train - mean) / std, (x_val - mean) / std


def _finish(xtr, ytr, xva, yva, num_classes, name) -> Dataset:
    xtr, xva = _standardise(xtr.astype(np.float32), xva.astype(np.float32))
    return Dataset(
        torch.from_numpy(np.ascontiguousarray(xtr, dtype=np.float32)),
        torch.from_numpy(ytr.astype(np.int64)),
        torch.from_numpy(np.ascontiguousarray(xva, dtype=np.float32)),
        torch.from_numpy(yva.astype(np.int64)),
        num_classes, name,
    )


def load_cifar(root, num_classes: int = 10, subset: float = 1.0, seed: int = 0) -> Dataset:
    """Read the python-pickle release of CIFAR-10/100 from ``root``.

    ``root`` may point at the extracted ``cifar-10-batches-py`` /
    ``cifar-100-python`` directory or at its parent.
    """
    root = Path(root)
    folder = "cifar-10-batches-py" if num_classes == 10 else "cifar-100-python"
    if (root / folder).is_dir():
        root = root / folder
    if num_classes == 10:
        train_files = [root / f"data_batch_{i}" for i in range(1, 6)]
        test_files = [root / "test_batch"]
        label_key = b"labels"
    else:
        train_files = [root / "train"]
        test_files = [root / "test"]
        label_key = b"fine_labels"
    missing = [str(p) for p in train_files + test_files if not p.exists()]
    if missing:
        raise FileNotFoundError(f"CIFAR-{num_classes} files not found: {missing[0]}")

    def read(files):
        xs, ys = [], []
        for p in files:
            with open(p, "rb") as fh:
                d = pickle.load(fh, encoding="bytes")
            xs.append(np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
            ys.append(np.asarray(d[label_key]))
        return np.concatenate(xs) / 255.0, np.concatenate(ys)

    xtr, ytr = read(train_files)
    xva, yva = read(test_files)
    rng = np.random.default_rng(seed)
    tr = _stratified_subset(ytr, subset, rng)
    va = _stratified_subset(yva, subset, rng)
    return _finish(xtr[tr], ytr[tr], xva[va], yva[va], num_classes, f"cifar{num_classes}")


def load_digits(subset: float = 1.0, seed: int = 0, val_fraction: float = 0.25) -> Dataset:
    """sklearn's bundled 8x8 handwritten digits (1797 images, 10 classes)."""
    from sklearn.datasets import load_digits as _load

    d = _load()
    x = (d.images / 16.0)[:, None]
    y = d.target
    rng = np.random.default_rng(seed)
    keep = _stratified_subset(y, subset, rng)
    x, y = x[keep], y[keep]
    val = _stratified_subset(y, val_fraction, rng)
    mask = np.zeros(len(y), bool)
    mask[val] = True
    return _finish(x[~mask], y[~mask], x[mask], y[mask], 10, "digits")


def make_synthetic(num_classes: int = 2, per_class: int = 64, shape=(1, 8, 8),
                   noise: float = 0.3, seed: int = 0, val_fraction: float = 0.25) -> Dataset:
    """Each class is a fixed random template plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    templates = rng.normal(size=(num_classes, *shape))
    y = np.repeat(np.arange(num_classes), per_class)
    x = templates[y] + noise * rng.normal(size=(len(y), *shape))
    val = _stratified_subset(y, val_fraction, rng)
    mask = np.zeros(len(y), bool)
    mask[val] = True
    return _finish(x[~mask], y[~mask], x[mask], y[mask], num_classes, "synthetic")


def load_dataset(name: str, root=None, subset: float = 1.0, seed: int = 0,
                 num_classes: int | None = None) -> Dataset:
    if name in ("cifar10", "cifar100"):
        if root is None:
            raise FileNotFoundError(f"{name} requires data.root")
        return load_cifar(root, 10 if name == "cifar10" else 100, subset, seed)
    if name == "digits":
        return load_digits(subset, seed)
    if name == "synthetic":
        return make_synthetic(num_classes or 10, seed=seed)
    raise ValueError(f"unknown dataset {name!r}")
