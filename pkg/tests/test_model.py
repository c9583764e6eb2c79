import struct

import numpy as np
import pytest

from ttclab.attacks import AttackConfig, pgd_attack
from ttclab.autograd import DegenerateInputError, DimensionError, Tensor
from ttclab.data import generate_synthetic
from ttclab.model import (AdversarialTraining, Architecture, CheckpointError, DualEncoder, TrainConfig,
                          TrainingError, class_scores, encode_image, finetune_tecoa, load_checkpoint,
                          save_checkpoint, train_clean)


def blobs():
    return generate_synthetic(K=2, per_class=100, C=1, W=4, H=4, separation=2.0, noise=0.1, seed=5)


def blob_model(seed=0):
    return DualEncoder.init(Architecture(1, 4, 4, 16, 8, 2), seed=seed)


def test_zero_weights_give_zero_embedding():
    arch = Architecture(1, 2, 2, 3, 2, 2)
    m = DualEncoder(arch, [(np.zeros((4, 3)), np.zeros(3)), (np.zeros((3, 2)), np.zeros(2))], np.eye(2))
    x = np.random.default_rng(0).uniform(size=(1, 2, 2))
    np.testing.assert_array_equal(encode_image(m, x).data, 0)


def test_encode_deterministic_and_identity(small, images8):
    a = encode_image(small, images8[0]).data
    b = encode_image(small, images8[0]).data
    assert a.tobytes() == b.tobytes()
    arch = Architecture(1, 2, 2, 0, 4, 2)
    ident = DualEncoder(arch, [(np.eye(4), np.zeros(4))], np.eye(2, 4))
    x = np.array([[[0.1, 0.2], [0.3, 0.4]]], dtype=np.float32)
    np.testing.assert_array_equal(encode_image(ident, x).data, x.reshape(-1))


def test_shape_mismatch_raises(small):
    with pytest.raises(DimensionError):
        encode_image(small, np.zeros((3, 4, 4), dtype=np.float32))


def test_class_scores_examples():
    arch = Architecture(1, 1, 2, 0, 2, 2)
    m = DualEncoder(arch, [(np.eye(2), np.zeros(2))], np.eye(2), logit_scale=10.0)
    s = class_scores(m, np.array([[[1.0, 0.0]]])).data
    np.testing.assert_allclose(s, [10.0, 0.0], atol=1e-6)
    p = m.predict_proba(np.array([[[1.0, 0.0]]], dtype=np.float32))
    np.testing.assert_allclose(p, [0.99995, 4.5e-5], rtol=1e-2, atol=1e-6)
    # embedding equal to class row 2 of an orthonormal table
    arch3 = Architecture(1, 1, 3, 0, 3, 3)
    m3 = DualEncoder(arch3, [(np.eye(3), np.zeros(3))], np.eye(3), logit_scale=10.0)
    s3 = class_scores(m3, np.array([[[0.0, 0.0, 1.0]]])).data
    assert int(np.argmax(s3)) == 2 and s3[2] == pytest.approx(10.0)
    m3.class_embeddings = 3 * m3.class_embeddings
    assert int(np.argmax(class_scores(m3, np.array([[[0.0, 0.0, 1.0]]])).data)) == 2


def test_zero_embedding_is_degenerate():
    arch = Architecture(1, 1, 2, 0, 2, 2)
    m = DualEncoder(arch, [(np.zeros((2, 2)), np.zeros(2))], np.eye(2))
    with pytest.raises(DegenerateInputError):
        class_scores(m, np.array([[[0.5, 0.5]]]))


def test_scores_bounded_and_argmax_invariant(small, images8):
    s = small.scores(images8)
    g = small.logit_scale
    assert s.min() >= -g - 1e-4 and s.max() <= g + 1e-4
    np.testing.assert_allclose(class_scores(small, images8).data, s, atol=1e-5)
    pred = small.predict(images8)
    m2 = small.copy()
    m2.class_embeddings = m2.class_embeddings * np.array([[0.5], [3.0], [7.0], [1e-2]], dtype=np.float32)
    np.testing.assert_array_equal(m2.predict(images8), pred)
    # rescaling the final layer rescales the embedding
    m3 = small.copy()
    w, b = m3.layers[-1]
    m3.layers[-1] = (4.2 * w, 4.2 * b)
    np.testing.assert_array_equal(m3.predict(images8), pred)


def test_logit_scale_does_not_change_argmax(small, images8):
    m = small.copy()
    m.logit_scale = 1.0
    np.testing.assert_array_equal(m.predict(images8), small.predict(images8))


def test_train_clean_blobs():
    ds = blobs()
    result = train_clean(blob_model(), ds.images, ds.labels, TrainConfig(learning_rate=0.05, epochs=30, seed=0))
    assert result.model.accuracy(ds.images, ds.labels) >= 0.95
    assert result.loss_curve[-1] < result.loss_curve[0]
    assert len(result.loss_curve) == 30
    norms = np.linalg.norm(result.model.class_embeddings, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-5)


def test_zero_epochs_leave_parameters():
    ds = blobs()
    m = blob_model()
    out = train_clean(m, ds.images, ds.labels, TrainConfig(epochs=0)).model
    for k, v in m.parameters().items():
        assert out.parameters()[k].tobytes() == v.tobytes()


def test_training_errors():
    m = blob_model()
    with pytest.raises(TrainingError):
        train_clean(m, np.zeros((0, 1, 4, 4)), np.zeros(0, dtype=int), TrainConfig(epochs=1))
    with pytest.raises(TrainingError):
        train_clean(m, np.zeros((2, 1, 4, 4)), np.array([0, 5]), TrainConfig(epochs=1))
    with pytest.raises(TrainingError, match="epoch"):
        train_clean(m, np.full((4, 1, 4, 4), 0.5), np.array([0, 1, 0, 1]), TrainConfig(learning_rate=1e30, epochs=3))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        AdversarialTraining(steps=0)
    with pytest.raises(ValueError):
        AdversarialTraining(epsilon=0.2)
    with pytest.raises(ValueError):
        finetune_tecoa(blob_model(), blobs().images, blobs().labels, TrainConfig())


def test_finetune_freezes_class_embeddings_and_gains_robustness():
    ds = blobs()
    base = train_clean(blob_model(), ds.images, ds.labels, TrainConfig(learning_rate=0.05, epochs=30)).model
    adv = AdversarialTraining(steps=2, epsilon=0.03, alpha=0.03)
    tuned = finetune_tecoa(base, ds.images, ds.labels,
                           TrainConfig(learning_rate=0.05, epochs=10, adversarial=adv)).model
    assert tuned.class_embeddings.tobytes() == base.class_embeddings.tobytes()
    assert any(a[0].tobytes() != b[0].tobytes() for a, b in zip(tuned.layers, base.layers))
    cfg = AttackConfig(epsilon=0.03, alpha=0.0075, steps=10)
    rob_base = base.accuracy(pgd_attack(base, ds.images, ds.labels, cfg), ds.labels)
    rob_tuned = tuned.accuracy(pgd_attack(tuned, ds.images, ds.labels, cfg), ds.labels)
    assert rob_tuned > rob_base


def test_checkpoint_roundtrip(tmp_path, small, images8):
    p1, p2 = tmp_path / "a.ttck", tmp_path / "b.ttck"
    save_checkpoint(small, p1)
    loaded = load_checkpoint(p1)
    assert loaded.arch == small.arch
    for k, v in small.parameters().items():
        assert loaded.parameters()[k].tobytes() == v.tobytes()
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(loaded.scores(images8), small.scores(images8))


def test_checkpoint_layout(tmp_path, small):
    p = tmp_path / "m.ttck"
    save_checkpoint(small, p)
    buf = p.read_bytes()
    assert buf[:4] == b"TTCK"
    assert struct.unpack_from("<I", buf, 4) == (1,)
    assert struct.unpack_from("<6I", buf, 8) == (3, 8, 8, 16, 8, 4)
    assert struct.unpack_from("<f", buf, 32)[0] == pytest.approx(10.0)


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XTCK" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
    (lambda b: b[:-7], "truncated"),
    (lambda b: b[:8] + struct.pack("<I", 1 << 30) + b[12:], "overflow"),
])
def test_checkpoint_defects(tmp_path, small, mutate, match):
    p = tmp_path / "m.ttck"
    save_checkpoint(small, p)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(CheckpointError, match=match):
        load_checkpoint(p)


def test_missing_checkpoint_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.ttck"):
        load_checkpoint(tmp_path / "nope.ttck")


def test_pinned_checkpoint_reproduces_accuracy(tmp_path, pinned, pinned_test):
    p = tmp_path / "pinned.ttck"
    save_checkpoint(pinned, p)
    loaded = load_checkpoint(p)
    assert loaded.accuracy(pinned_test.images, pinned_test.labels) == pinned.accuracy(
        pinned_test.images, pinned_test.labels)


def test_float64_inputs_stay_float64(small, images8):
    assert small.embed(images8.astype(np.float64)).dtype == np.float64
    assert small.embed(images8).dtype == np.float32
    assert encode_image(small, Tensor(images8)).dtype == np.float32
