import io
import warnings

import numpy as np
import pytest

from conftest import identity_model
from ttclab.attacks import AttackConfig
from ttclab.autograd import DegenerateInputError
from ttclab.model import Architecture, DualEncoder
from ttclab.stability import (SCAN_COLUMNS, encoder_sensitivity_report, jacobian_activation_compare,
                              jacobian_drift_check, linearized_drift, tau, tau_scan)


def linear_encoder(seed=0, n=12, d=5):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, d))
    arch = Architecture(1, 1, n, 0, d, 2)
    return DualEncoder(arch, [(A, np.zeros(d))], rng.normal(size=(2, d))), A


def smooth_encoder(seed=0):
    m = DualEncoder.init(Architecture(1, 4, 4, 12, 6, 3), seed=seed)
    m.activation = "softplus"
    return m


def test_tau_examples():
    m = identity_model(shape=(1, 2, 3))
    rng = np.random.default_rng(0)
    x = rng.uniform(0.2, 0.8, size=(1, 2, 3))
    assert tau(m, x, np.zeros_like(x)) == 0.0
    n = rng.uniform(-0.01, 0.01, size=x.shape)
    assert tau(m, x, n) == pytest.approx(np.linalg.norm(n) / np.linalg.norm(x), rel=1e-5)
    lin, A = linear_encoder()
    x = rng.uniform(0.2, 0.8, size=(1, 1, 12))
    n = rng.uniform(-0.05, 0.05, size=x.shape)
    expected = np.linalg.norm(n.reshape(-1) @ A) / np.linalg.norm(x.reshape(-1) @ A)
    assert abs(tau(lin, x, n) - expected) <= 1e-5


def test_tau_errors_and_scale_invariance(small, images8):
    zero = DualEncoder(Architecture(1, 2, 2, 0, 2, 2), [(np.zeros((4, 2)), np.zeros(2))], np.eye(2))
    with pytest.raises(DegenerateInputError):
        tau(zero, np.full((1, 2, 2), 0.5), np.full((1, 2, 2), 0.01))
    n = np.random.default_rng(1).uniform(-0.02, 0.02, size=images8[0].shape).astype(np.float32)
    base = tau(small, images8[0], n)
    assert base >= 0
    scaled = tau(lambda v: 3.7 * small.embed(v), images8[0], n)
    assert abs(scaled - base) <= 1e-6


def test_tau_scan_rejects_empty_statistics(small, images8):
    with pytest.raises(ValueError):
        tau_scan(small, images8, np.zeros(6, dtype=int), trials=0)
    with pytest.raises(ValueError):
        tau_scan(small, images8, np.zeros(6, dtype=int), epsilon_grid=[2 / 255, 1 / 255])


def test_tau_scan_identity_curves_coincide():
    m = identity_model(shape=(1, 4, 4), n_classes=2)
    rng = np.random.default_rng(3)
    x = rng.uniform(0.3, 0.7, size=(60, 1, 4, 4)).astype(np.float32)
    y = rng.integers(0, 2, size=60)
    res = tau_scan(m, x, y, AttackConfig(epsilon=1 / 255, alpha=1 / 1020, steps=10), trials=10, seed=1)
    n = res.sample_count * res.trials
    for cm, cs, am, a_s in zip(res.clean_means, res.clean_stds, res.adv_means, res.adv_stds):
        se = np.sqrt(cs ** 2 / n + a_s ** 2 / n)
        assert abs(cm - am) <= 3 * se


def test_tau_scan_reproducible_and_csv(small, images8):
    y = np.arange(6) % 4
    cfg = AttackConfig(epsilon=2 / 255, alpha=0.5 / 255, steps=3)
    a = tau_scan(small, images8, y, cfg, trials=3, seed=4)
    b = tau_scan(small, images8, y, cfg, trials=3, seed=4)
    assert a.rows() == b.rows()
    assert all(v >= 0 for v in a.clean_means + a.adv_means)
    buf = io.StringIO()
    a.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(SCAN_COLUMNS)
    assert len(lines) == 1 + len(a.epsilon_grid)
    assert lines[1].split(",")[-1] == str(6 * 3)


def test_tau_scan_skips_degenerate(images8):
    arch = Architecture(3, 8, 8, 0, 2, 2)
    w = np.zeros((192, 2))
    w[0, 0] = 1.0  # embedding is the first pixel, zero for black images
    m = DualEncoder(arch, [(w, np.zeros(2))], np.eye(2))
    x = images8.copy()
    x[0, 0, 0, 0] = 0.0
    with pytest.warns(UserWarning, match="skipped 1"):
        res = tau_scan(m, x, np.zeros(6, dtype=int), adv_images=x, trials=2)
    assert res.sample_count == 5 and res.skipped == 1


def test_jacobian_drift_check_linear_and_zero():
    lin, _ = linear_encoder(seed=2)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(1, 1, 12))
    n = rng.uniform(-1e-2, 1e-2, size=x.shape)
    assert jacobian_drift_check(lin, x, n).rel_gap <= 1e-4
    zero = jacobian_drift_check(lin, x, np.zeros_like(x))
    assert (zero.exact_drift, zero.linearized_drift, zero.rel_gap) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        jacobian_drift_check(lin, x, np.full(x.shape, 0.02))


def test_jacobian_drift_check_smooth():
    m = smooth_encoder(1)
    rng = np.random.default_rng(5)
    ok = 0
    for _ in range(100):
        x = rng.uniform(size=(1, 4, 4))
        n = rng.choice([-1e-3, 1e-3], size=x.shape)
        ok += jacobian_drift_check(m, x, n).rel_gap <= 0.05
    assert ok >= 95


def test_drift_halves_with_noise():
    m = smooth_encoder(2)
    rng = np.random.default_rng(6)
    for _ in range(20):
        x = rng.uniform(size=(1, 4, 4))
        n = rng.uniform(-1e-2, 1e-2, size=x.shape)
        full = jacobian_drift_check(m, x, n).exact_drift
        half = jacobian_drift_check(m, x, n / 2).exact_drift
        assert abs(half / full - 0.5) <= 0.05
        lin = float(linearized_drift(m, x, n / 2))
        assert abs(half - lin) / lin <= 0.1


def test_activation_compare_basics(small, images8):
    same = jacobian_activation_compare(small, images8, images8, trials=2, seed=1)
    assert same.mean_clean_activation == same.mean_adv_activation
    assert same.paired_z() == 0.0
    a = jacobian_activation_compare(small, images8, images8[::-1].copy(), trials=1, seed=3)
    b = jacobian_activation_compare(small, images8, images8[::-1].copy(), trials=1, seed=3)
    assert a.mean_clean_activation == b.mean_clean_activation
    assert a.mean_adv_activation == b.mean_adv_activation
    with pytest.raises(ValueError):
        jacobian_activation_compare(small, images8, images8[:2])


def test_sensitivity_report(small, images8):
    y = np.arange(6) % 4
    scan = tau_scan(small, images8, y, AttackConfig(), trials=2, seed=7)
    rep = encoder_sensitivity_report([("a", small)], images8, seed=7, trials=2)
    assert rep.row("a") == scan.clean_means
    dup = encoder_sensitivity_report({"a": small, "b": small.copy()}, images8, seed=7, trials=2)
    assert dup.row("a") == dup.row("b")
    buf = io.StringIO()
    dup.to_csv(buf)
    assert buf.getvalue().splitlines()[0].startswith("encoder,")
    with pytest.raises(ValueError):
        encoder_sensitivity_report([], images8)


def test_no_warning_on_clean_inputs(small, images8):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        tau_scan(small, images8, np.zeros(6, dtype=int), adv_images=images8, trials=1)
