import struct

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from ttclab.data import (IDXCountMismatchError, IDXMagicError, IDXTruncatedError, Dataset, generate_synthetic,
                         load_idx, train_test_split, write_idx)
from ttclab.model import Architecture, DualEncoder, TrainConfig, train_clean


def test_idx_single_image_fixture(tmp_path):
    img = np.array([[[0, 255], [51, 102]]], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    # handcrafted bytes, not written through the library
    ip.write_bytes(bytes.fromhex("00000803") + struct.pack(">3I", 1, 2, 2) + img.tobytes())
    lp.write_bytes(bytes.fromhex("00000801") + struct.pack(">I", 1) + bytes([7]))
    ds = load_idx(ip, lp)
    assert ds.images.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(ds.images[0, 0], np.array([[0, 255], [51, 102]], np.float32) / np.float32(255))
    assert ds.images[0, 0, 0, 1] == 1.0
    assert ds.labels.tolist() == [7]


def test_idx_roundtrip_writer(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 3, 4), dtype=np.uint8)
    labs = rng.integers(0, 3, size=5).astype(np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", imgs, labs)
    ds = load_idx(tmp_path / "i", tmp_path / "l", n_classes=3)
    np.testing.assert_array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), imgs)
    assert ds.n_classes == 3


def _pair(tmp_path, n_img=2, n_lab=2):
    write_idx(tmp_path / "i", tmp_path / "l", np.zeros((n_img, 2, 2), np.uint8), np.zeros(n_lab, np.uint8))
    return tmp_path / "i", tmp_path / "l"


def test_idx_errors_are_distinct(tmp_path):
    ip, lp = _pair(tmp_path, 2, 3)
    with pytest.raises(IDXCountMismatchError):
        load_idx(ip, lp)
    ip, lp = _pair(tmp_path)
    with pytest.raises(IDXMagicError):
        load_idx(lp, ip)
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(IDXTruncatedError):
        load_idx(ip, lp)
    ip.write_bytes(b"\x00\x00")
    with pytest.raises(IDXTruncatedError):
        load_idx(ip, lp)


def test_synthetic_deterministic_and_valid():
    a = generate_synthetic(K=3, per_class=10, C=1, W=4, H=4, seed=2)
    b = generate_synthetic(K=3, per_class=10, C=1, W=4, H=4, seed=2)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert np.bincount(a.labels).tolist() == [10, 10, 10]
    with pytest.raises(ValueError):
        generate_synthetic(K=1)
    with pytest.raises(ValueError):
        generate_synthetic(W=0)


def test_synthetic_separated_is_linearly_separable():
    ds = generate_synthetic(K=2, per_class=100, C=1, W=8, H=8, separation=2.0, seed=0)
    X = ds.images.reshape(len(ds), -1)
    probe = LogisticRegression(max_iter=2000).fit(X, ds.labels)
    assert probe.score(X, ds.labels) >= 0.99


def test_synthetic_zero_separation_is_chance():
    K = 4
    train = generate_synthetic(K=K, per_class=100, C=1, W=4, H=4, separation=0.0, seed=1)
    test = generate_synthetic(K=K, per_class=100, C=1, W=4, H=4, separation=0.0, seed=2)
    m = DualEncoder.init(Architecture(1, 4, 4, 16, 8, K), seed=0)
    m = train_clean(m, train.images, train.labels, TrainConfig(learning_rate=0.05, epochs=10)).model
    assert abs(m.accuracy(test.images, test.labels) - 1 / K) <= 0.1


def test_dataset_validation_and_split():
    with pytest.raises(ValueError):
        Dataset(np.full((2, 1, 2, 2), 1.5), [0, 1])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2)), [0])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2)), [0, 1], ["a"])
    ds = generate_synthetic(K=2, per_class=10, C=1, W=4, H=4)
    tr, te = train_test_split(ds, 0.2, seed=0)
    assert len(tr) == 16 and len(te) == 4 and te.split == "test"
