"""Dataset loaders against hand-built byte fixtures, plus batch iteration."""

import os
import struct
from pathlib import Path

import numpy as np
import pytest

from corrbnn import data


def write_idx_pair(tmp_path, images, labels):
    """Serialize uint8 images (count, rows, cols) and labels into IDX files."""
    count, rows, cols = images.shape
    img_path = tmp_path / "images-idx3-ubyte"
    img_path.write_bytes(
        struct.pack(">IIII", 0x803, count, rows, cols) + images.tobytes()
    )
    lab_path = tmp_path / "labels-idx1-ubyte"
    lab_path.write_bytes(struct.pack(">II", 0x801, count) + labels.tobytes())
    return img_path, lab_path


def test_idx_round_trip_byte_exact(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, size=5, dtype=np.uint8)
    img_path, lab_path = write_idx_pair(tmp_path, images, labels)
    ds = data.load_mnist_idx(img_path, lab_path)
    assert ds.images.shape == (5, 1, 4, 3)
    assert np.array_equal(
        (ds.images * 255.0).round().astype(np.uint8)[:, 0], images
    )
    assert np.array_equal(ds.labels, labels.astype(np.int64))
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_idx_error_paths(tmp_path):
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(3, 2, 2), dtype=np.uint8)
    labels = np.array([1, 2, 3], dtype=np.uint8)
    img_path, lab_path = write_idx_pair(tmp_path, images, labels)

    bad = tmp_path / "bad"
    bad.write_bytes(b"\x00" * 4)
    with pytest.raises(data.TruncatedRecord):
        data.load_mnist_idx(bad, lab_path)

    bad.write_bytes(struct.pack(">IIII", 0x999, 3, 2, 2) + images.tobytes())
    with pytest.raises(data.BadMagic):
        data.load_mnist_idx(bad, lab_path)

    bad.write_bytes(struct.pack(">IIII", 0x803, 3, 2, 2) + images.tobytes()[:-1])
    with pytest.raises(data.DimensionMismatch):
        data.load_mnist_idx(bad, lab_path)

    short = tmp_path / "short-labels"
    short.write_bytes(struct.pack(">II", 0x801, 2) + labels.tobytes()[:2])
    with pytest.raises(data.CountMismatch):
        data.load_mnist_idx(img_path, short)


def write_cifar_batch(path, images, labels):
    """images (count, 3, 32, 32) uint8, labels (count,) uint8."""
    recs = []
    for img, lab in zip(images, labels):
        recs.append(bytes([lab]) + img.tobytes())
    Path(path).write_bytes(b"".join(recs))


def test_cifar_round_trip_byte_exact(tmp_path):
    rng = np.random.default_rng(2)
    images = rng.integers(0, 256, size=(4, 3, 32, 32), dtype=np.uint8)
    labels = rng.integers(0, 10, size=4, dtype=np.uint8)
    path = tmp_path / "batch.bin"
    write_cifar_batch(path, images, labels)
    ds = data.load_cifar10_bin([path])
    assert ds.images.shape == (4, 3, 32, 32)
    assert np.array_equal((ds.images * 255.0).round().astype(np.uint8), images)
    assert np.array_equal(ds.labels, labels.astype(np.int64))


def test_cifar_rejects_truncated(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(b"\x01" * 3000)
    with pytest.raises(data.TruncatedRecord):
        data.load_cifar10_bin([path])


def test_cifar_concatenates_batches(tmp_path):
    rng = np.random.default_rng(3)
    paths = []
    for i in range(2):
        images = rng.integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
        labels = rng.integers(0, 10, size=3, dtype=np.uint8)
        p = tmp_path / f"b{i}.bin"
        write_cifar_batch(p, images, labels)
        paths.append(p)
    ds = data.load_cifar10_bin(paths)
    assert len(ds) == 6


_OFFICIAL = Path(os.environ.get("CORRBNN_DATA_DIR", "data"))


@pytest.mark.skipif(
    not (_OFFICIAL / "train-images-idx3-ubyte").exists(),
    reason="official digit files not present",
)
def test_official_digit_file_counts():
    train = data.load_mnist_idx(
        _OFFICIAL / "train-images-idx3-ubyte", _OFFICIAL / "train-labels-idx1-ubyte"
    )
    test = data.load_mnist_idx(
        _OFFICIAL / "t10k-images-idx3-ubyte", _OFFICIAL / "t10k-labels-idx1-ubyte"
    )
    assert len(train) == 60_000
    assert len(test) == 10_000


@pytest.mark.skipif(
    not (_OFFICIAL / "data_batch_1.bin").exists(),
    reason="official CIFAR-10 batches not present",
)
def test_official_cifar_counts():
    train = data.load_cifar10_bin(
        [_OFFICIAL / f"data_batch_{i}.bin" for i in range(1, 6)]
    )
    test = data.load_cifar10_bin([_OFFICIAL / "test_batch.bin"])
    assert len(train) == 50_000
    assert len(test) == 10_000


def test_blobs_are_deterministic_and_separated():
    a = data.synthetic_blobs(3, 50, 4, 8.0, seed=7)
    b = data.synthetic_blobs(3, 50, 4, 8.0, seed=7)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert sorted(np.bincount(a.labels)) == [50, 50, 50]
    c = data.synthetic_blobs(3, 50, 4, 8.0, seed=8)
    assert not np.array_equal(a.images, c.images)


def test_synthetic_digits_shape_and_determinism():
    ds = data.synthetic_digits(30, 10, seed=1)
    assert len(ds) == 40
    assert ds.images.shape == (40, 1, 28, 28)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.class_count == 10
    again = data.synthetic_digits(30, 10, seed=1)
    assert np.array_equal(ds.images, again.images)


def test_first_k_per_class():
    labels = np.array([0, 1, 0, 0, 1, 2, 2, 2, 2])
    images = np.arange(9, dtype=np.float64).reshape(9, 1, 1, 1)
    ds = data.Dataset(images, labels, 3)
    sub = data.first_k_per_class(ds, 2)
    assert list(sub.labels) == [0, 1, 0, 1, 2, 2]
    assert list(sub.images.ravel()) == [0, 1, 2, 4, 5, 6]


def test_dataset_count_mismatch():
    with pytest.raises(data.CountMismatch):
        data.Dataset(np.zeros((3, 1, 1, 1)), np.zeros(4, dtype=np.int64), 2)


def test_minibatches_cover_each_epoch_exactly():
    ds = data.Dataset(np.zeros((10, 1, 1, 1)), np.zeros(10, dtype=np.int64), 1)
    gen = data.minibatches(ds, 4, seed=0)
    first_epoch = np.concatenate([next(gen) for _ in range(3)])
    assert sorted(first_epoch) == list(range(10))
    second_epoch = np.concatenate([next(gen) for _ in range(3)])
    assert sorted(second_epoch) == list(range(10))
    # shuffles differ between epochs but are reproducible across generators
    assert not np.array_equal(first_epoch, second_epoch)
    gen2 = data.minibatches(ds, 4, seed=0)
    assert np.array_equal(np.concatenate([next(gen2) for _ in range(3)]),
                          first_epoch)


def test_epoch_order_keyed_by_seed_and_epoch():
    a = data.epoch_order(100, seed=1, epoch=0)
    assert np.array_equal(a, data.epoch_order(100, seed=1, epoch=0))
    assert not np.array_equal(a, data.epoch_order(100, seed=1, epoch=1))
    assert not np.array_equal(a, data.epoch_order(100, seed=2, epoch=0))
