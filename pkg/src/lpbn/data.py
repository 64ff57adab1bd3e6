"""Datasets: CIFAR-10 binary batches and synthetic Gaussian blobs."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorcore import make_rng

RECORD_BYTES = 3073  # 1 label byte + 3 x 32 x 32 pixel bytes
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    description: str = ""

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} feature rows but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self) else 0


@dataclass
class CifarSource:
    """Location of CIFAR-10 binary batches (a directory, or a single batch file)."""

    path: str
    n_train: int | None = 5000
    n_test: int | None = 1000
    flatten: bool = True
    seed: int = 0


def read_cifar_records(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw (pixels uint8 (n, 3072), labels uint8 (n,)) from one binary batch file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise ValueError(f"{path}: size {raw.size} is not a positive multiple of {RECORD_BYTES}-byte records")
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0]
    if labels.max() > 9:
        bad = int(np.flatnonzero(labels > 9)[0])
        raise ValueError(f"{path}: record {bad} has label {labels[bad]} outside 0..9")
    return rec[:, 1:], labels


def scale_pixels(pixels: np.ndarray) -> np.ndarray:
    """Bytes 0..255 onto [-1, 1]."""
    return (pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def _files(src: CifarSource, split: str) -> list[Path]:
    if "imagenet" in str(src.path).lower():
        raise ValueError("ImageNet is out of scope; only CIFAR-10 binary batches are supported")
    p = Path(src.path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise FileNotFoundError(f"CIFAR-10 location {p} does not exist")
    names = TRAIN_FILES if split == "train" else TEST_FILES
    found = [p / n for n in names if (p / n).exists()]
    nested = p / "cifar-10-batches-bin"
    if not found and nested.is_dir():
        found = [nested / n for n in names if (nested / n).exists()]
    if not found:
        raise FileNotFoundError(f"no CIFAR-10 {split} batch files ({', '.join(names)}) under {p}")
    return found


def load_cifar(src: CifarSource, split: str = "train") -> Dataset:
    """Read, subset (seeded) and scale one split."""
    if split not in ("train", "test"):
        raise ValueError("split must be train or test")
    parts = [read_cifar_records(f) for f in _files(src, split)]
    pixels = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts]).astype(np.int64)
    limit = src.n_train if split == "train" else src.n_test
    if limit is not None and limit < len(labels):
        rng = make_rng(src.seed + (0 if split == "train" else 1))
        keep = np.sort(rng.permutation(len(labels))[:limit])
        pixels, labels = pixels[keep], labels[keep]
    x = scale_pixels(pixels)
    if not src.flatten:
        x = x.reshape(-1, 3, 32, 32)
    return Dataset(x, labels, f"cifar10:{split}:{len(labels)}")


def cifar_dir_from_env() -> str | None:
    path = os.environ.get("LPBN_CIFAR_DIR")
    return path if path and os.path.isdir(path) else None


def gen_synthetic(classes: int, dim: int, n: int, seed: int = 0, separation: float = 10.0) -> Dataset:
    """Gaussian blobs with unit noise; class means sit ``separation`` apart (in noise SDs)."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = make_rng(seed)
    directions = rng.standard_normal((classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    if classes == 2:
        means = np.stack([directions[0], -directions[0]]) * (separation / 2)
    else:
        means = directions * (separation / np.sqrt(2))
    y = rng.permutation(np.arange(n) % classes).astype(np.int64)
    x = (means[y] + rng.standard_normal((n, dim))).astype(np.float32)
    return Dataset(x, y, f"synthetic:{classes}x{dim}:{n}")
