"""Synthetic datasets and IDX (MNIST-style) ingestion.

Every example carries a stable integer sample id: its position in the
canonical order.  Train ids come first, then test ids.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from ..tensor_core import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    ids_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    ids_test: np.ndarray
    classes: int

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.x_train.shape[1:]))


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    classes: int = 10
    dims: int = 20
    samples: int = 2000
    spread: float = 2.5
    noise: float = 0.1
    images_path: str = ""
    labels_path: str = ""
    split: float = 0.8
    seed: int = 0


def _split(x, y, split: float, classes: int) -> Dataset:
    n = len(x)
    n_train = int(math.floor(split * n))
    if not 0 < n_train <= n:
        raise DatasetError(f"split {split} leaves no training data")
    ids = np.arange(n, dtype=np.int64)
    return Dataset(
        x[:n_train], y[:n_train], ids[:n_train], x[n_train:], y[n_train:], ids[n_train:], classes
    )


def blobs(classes: int, dims: int, samples: int, spread: float, rng: np.random.Generator):
    """Gaussian blobs: class c centred at a random direction scaled to norm ``spread``."""
    dirs = rng.normal(size=(classes, dims))
    centers = spread * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    y = np.arange(samples) % classes
    x = centers[y] + rng.normal(size=(samples, dims))
    perm = rng.permutation(samples)
    return x[perm], y[perm].astype(np.int64)


def two_moons(samples: int, noise: float, rng: np.random.Generator):
    y = np.arange(samples) % 2
    t = rng.uniform(0.0, math.pi, size=samples)
    x = np.where(
        y[:, None] == 0,
        np.stack([np.cos(t), np.sin(t)], axis=1),
        np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1),
    )
    x = x + noise * rng.normal(size=x.shape)
    perm = rng.permutation(samples)
    return x[perm], y[perm].astype(np.int64)


def gen_synthetic(spec: DatasetSpec, seed: int | None = None) -> Dataset:
    seed = spec.seed if seed is None else seed
    if spec.samples <= 0:
        raise DatasetError("sample count must be positive")
    rng = make_rng(seed)
    if spec.kind == "blobs":
        if spec.classes <= 0 or spec.dims <= 0:
            raise DatasetError("classes and dims must be positive")
        x, y = blobs(spec.classes, spec.dims, spec.samples, spec.spread, rng)
        return _split(x, y, spec.split, spec.classes)
    if spec.kind == "two_moons":
        x, y = two_moons(spec.samples, spec.noise, rng)
        return _split(x, y, spec.split, 2)
    raise DatasetError(f"not a synthetic dataset kind: {spec.kind!r}")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise DatasetError(f"truncated: {path} has {len(blob)} bytes")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise DatasetError(f"bad magic 0x{found:08x} in {path}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", blob[4:head])
    n = math.prod(dims)
    if len(blob) - head < n:
        raise DatasetError(f"truncated: {path} holds {len(blob) - head} of {n} data bytes")
    return np.frombuffer(blob, dtype=np.uint8, count=n, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as (N, 1, H, W) floats in [0, 1] and labels as int64."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DatasetError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return x, labels.astype(np.int64)


def make_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "idx_files":
        x, y = load_idx(spec.images_path, spec.labels_path)
        return _split(x, y, spec.split, int(y.max()) + 1 if spec.classes <= 0 else spec.classes)
    return gen_synthetic(spec)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())
