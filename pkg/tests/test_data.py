import gzip
import struct

import numpy as np
import pytest

from spikemlp.data import (BadMagicError, Dataset, DatasetError, LabelRangeError, SyntheticSpec, TruncatedFileError,
                           load_cifar_binary, load_dataset, load_idx, make_synthetic, write_synthetic_spec)


def _idx_images(n, h, w, pixels=None, magic=0x00000803):
    pixels = bytes(n * h * w) if pixels is None else pixels
    return struct.pack(">IIII", magic, n, h, w) + pixels


def test_cifar_zero_record(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(bytes(3073))
    ds = load_cifar_binary(p)
    assert ds.labels.tolist() == [0]
    assert ds.images.shape == (1, 3, 32, 32) and not ds.images.any()


def test_cifar_channel_major_layout(tmp_path):
    rec = np.zeros(3073, np.uint8)
    rec[0] = 7
    rec[1 + 1024 + 5] = 255  # green plane, row 0, col 5
    p = tmp_path / "b.bin"
    p.write_bytes(rec.tobytes() * 2)
    ds = load_cifar_binary(p)
    assert ds.labels.tolist() == [7, 7]
    assert ds.images[0, 1, 0, 5] == 1.0 and ds.images.sum() == 2.0


def test_cifar_errors(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(bytes(3000))
    with pytest.raises(TruncatedFileError):
        load_cifar_binary(p)
    rec = bytearray(3073)
    rec[0] = 10
    p.write_bytes(bytes(rec))
    with pytest.raises(LabelRangeError):
        load_cifar_binary(p)


def test_idx_header_arithmetic(tmp_path):
    p = tmp_path / "img"
    pix = bytes(range(32))
    p.write_bytes(_idx_images(2, 4, 4, pix))
    ds = load_idx(p)
    assert ds.images.shape == (2, 1, 4, 4)
    assert ds.images[1, 0, 3, 3] == pytest.approx(31 / 255)


def test_idx_with_gzip_labels(tmp_path):
    imgs, labs = tmp_path / "i.gz", tmp_path / "l.gz"
    imgs.write_bytes(gzip.compress(_idx_images(2, 4, 4)))
    labs.write_bytes(gzip.compress(struct.pack(">II", 0x00000801, 2) + bytes([3, 9])))
    assert load_idx(imgs, labs).labels.tolist() == [3, 9]


def test_idx_errors_are_distinct(tmp_path):
    p = tmp_path / "img"
    p.write_bytes(_idx_images(2, 4, 4, magic=0x00000801))
    with pytest.raises(BadMagicError):
        load_idx(p)
    p.write_bytes(_idx_images(2, 4, 4, bytes(31)))
    with pytest.raises(TruncatedFileError):
        load_idx(p)
    p.write_bytes(_idx_images(2, 4, 4))
    labs = tmp_path / "lab"
    labs.write_bytes(struct.pack(">II", 0x00000801, 2) + bytes([0, 12]))
    with pytest.raises(LabelRangeError):
        load_idx(p, labs)
    assert len({BadMagicError, TruncatedFileError, LabelRangeError}) == 3


def test_dataset_invariants():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1, 2, 2)), [0], 2)
    with pytest.raises(DatasetError):
        Dataset(np.full((1, 1, 2, 2), 1.5), [0], 2)
    with pytest.raises(LabelRangeError):
        Dataset(np.zeros((1, 1, 2, 2)), [2], 2)


def test_synthetic_is_deterministic_and_bounded():
    spec = SyntheticSpec(num_classes=3, size=8, n_train=30)
    a, b = make_synthetic(spec), make_synthetic(spec)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert np.bincount(a.labels).tolist() == [10, 10, 10]
    test = make_synthetic(spec, split="test")
    assert not np.array_equal(test.images[:5], a.images[:5])


def test_synthetic_linear_probe_separates():
    ds = make_synthetic(SyntheticSpec(num_classes=2, size=16, n_train=400, separation=1.0))
    X = ds.images.reshape(len(ds), -1)
    X = np.hstack([X - X.mean(axis=0), np.ones((len(ds), 1))])
    y = ds.labels.astype(float)
    w = np.zeros(X.shape[1])
    for _ in range(300):  # logistic regression by gradient descent
        p = 1.0 / (1.0 + np.exp(-X @ w))
        w -= 0.1 * X.T @ (p - y) / len(y)
    assert np.mean((X @ w > 0) == (y == 1)) == 1.0


def test_load_dataset_dispatch(tmp_path):
    spec = SyntheticSpec(size=8, n_train=6, n_test=4)
    write_synthetic_spec(spec, tmp_path / "syn")
    assert len(load_dataset(tmp_path / "syn")) == 6
    assert len(load_dataset(tmp_path / "syn", "test")) == 4
    cifar = tmp_path / "cifar"
    cifar.mkdir()
    (cifar / "data_batch_1.bin").write_bytes(bytes(3073) * 2)
    (cifar / "test_batch.bin").write_bytes(bytes(3073))
    assert len(load_dataset(cifar)) == 2 and len(load_dataset(cifar, "test")) == 1
    mnist = tmp_path / "mnist"
    mnist.mkdir()
    (mnist / "train-images-idx3-ubyte").write_bytes(_idx_images(3, 4, 4))
    assert load_dataset(mnist).images.shape == (3, 1, 4, 4)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
