"""Dataset ingestion and deterministic mini-batch iteration.

Supports the big-endian IDX format (handwritten digits), the CIFAR-10 binary
batch format, synthetic Gaussian blobs for smoke tests, and a digits-based
stand-in built from scikit-learn's bundled 8x8 digit images for environments
where the official files are not available.

Pixels are normalized to [0, 1]; no mean subtraction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class BadMagic(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class CountMismatch(ValueError):
    pass


class TruncatedRecord(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (count, channels, height, width) float64 in [0, 1]
    labels: np.ndarray  # (count,) int64 in [0, class_count)
    class_count: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatch("image/label count mismatch")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse a big-endian IDX image/label file pair (28x28 grayscale)."""
    raw = Path(images_path).read_bytes()
    if len(raw) < 16:
        raise TruncatedRecord("image file shorter than its header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != _IDX_IMAGE_MAGIC:
        raise BadMagic(f"bad image magic 0x{magic:08x}")
    if len(raw) != 16 + count * rows * cols:
        raise DimensionMismatch("image payload does not match header counts")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16)
    images = images.reshape(count, 1, rows, cols).astype(np.float64) / 255.0

    raw = Path(labels_path).read_bytes()
    if len(raw) < 8:
        raise TruncatedRecord("label file shorter than its header")
    magic, label_count = struct.unpack(">II", raw[:8])
    if magic != _IDX_LABEL_MAGIC:
        raise BadMagic(f"bad label magic 0x{magic:08x}")
    if len(raw) != 8 + label_count:
        raise DimensionMismatch("label payload does not match header count")
    if label_count != count:
        raise CountMismatch(f"{count} images but {label_count} labels")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images, labels, 10)


_CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10_bin(batch_paths) -> Dataset:
    """Parse CIFAR-10 binary batches: 1 label byte + 3072 pixel bytes (R, G, B
    planes) per record."""
    images = []
    labels = []
    for path in batch_paths:
        raw = Path(path).read_bytes()
        if len(raw) % _CIFAR_RECORD != 0:
            raise TruncatedRecord(f"{path}: size not a multiple of {_CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        images.append(
            records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
        )
    return Dataset(np.concatenate(images), np.concatenate(labels), 10)


def synthetic_blobs(classes: int, per_class: int, dims: int,
                    separation: float, seed: int) -> Dataset:
    """Unit-variance Gaussian blobs at centers ``separation`` apart along
    random orthogonal-ish directions; images come out as (count, 1, 1, dims)."""
    if classes < 1 or per_class < 1 or dims < 1:
        raise ValueError("counts must be positive")
    rng = np.random.Generator(np.random.Philox(key=seed))
    centers = rng.standard_normal((classes, dims))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= separation
    xs = []
    ys = []
    for k in range(classes):
        xs.append(centers[k] + rng.standard_normal((per_class, dims)))
        ys.append(np.full(per_class, k, dtype=np.int64))
    images = np.concatenate(xs).reshape(-1, 1, 1, dims)
    labels = np.concatenate(ys)
    order = rng.permutation(labels.size)
    return Dataset(images[order], labels[order], classes)


def synthetic_digits(train_count: int, test_count: int, seed: int) -> Dataset:
    """28x28 digit images built by upsampling scikit-learn's bundled 8x8
    digits and pasting them at random offsets; a deterministic stand-in for
    the real handwritten-digit files at desk scale.

    Returns one dataset of train_count + test_count examples; split it with
    Dataset.subset.
    """
    from sklearn.datasets import load_digits

    base = load_digits()
    rng = np.random.Generator(np.random.Philox(key=seed))
    total = train_count + test_count
    images = np.zeros((total, 1, 28, 28))
    labels = np.empty(total, dtype=np.int64)
    src = base.images / 16.0  # (1797, 8, 8) with values 0..16
    picks = rng.integers(0, src.shape[0], size=total)
    for i, pick in enumerate(picks):
        img = np.kron(src[pick], np.ones((3, 3)))  # 24x24
        r, c = rng.integers(0, 5, size=2)
        images[i, 0, r : r + 24, c : c + 24] = img
        labels[i] = base.target[pick]
    return Dataset(images, labels, 10)


def first_k_per_class(dataset: Dataset, k: int) -> Dataset:
    """Deterministic desk-scale subset: the first k examples of each class in
    file order."""
    keep = []
    counts = {}
    for i, label in enumerate(dataset.labels):
        label = int(label)
        if counts.get(label, 0) < k:
            counts[label] = counts.get(label, 0) + 1
            keep.append(i)
    return dataset.subset(np.asarray(keep, dtype=np.int64))


def minibatches(dataset: Dataset, batch_size: int, seed: int):
    """Endless generator of index batches; each epoch is a seeded shuffle keyed
    by (seed, epoch), and the final short batch of an epoch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    count = len(dataset)
    epoch = 0
    while True:
        order = epoch_order(count, seed, epoch)
        for lo in range(0, count, batch_size):
            yield order[lo : lo + batch_size]
        epoch += 1


def epoch_order(count: int, seed: int, epoch: int) -> np.ndarray:
    """The permutation used for one epoch; deterministic in (seed, epoch)."""
    gen = np.random.Generator(np.random.Philox(key=(int(seed) << 20) + epoch))
    return gen.permutation(count)
