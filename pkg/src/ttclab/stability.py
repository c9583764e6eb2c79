"""Drift-ratio analyses: tau, noise-strength scans, sensitivity tables and
first-order (Jacobian) checks of how far an embedding moves under pixel noise.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .attacks import AttackConfig, run_attack
from .autograd import DegenerateInputError
from .utils import uniform_noise

logger = logging.getLogger(__name__)

DEFAULT_GRID = (1 / 255, 2 / 255, 4 / 255, 8 / 255, 16 / 255)
DEFAULT_TRIALS = 10
JVP_STEP = 1e-4
SCAN_COLUMNS = ("epsilon", "clean_mean", "clean_std", "adv_mean", "adv_std", "n")


def _open_out(path):
    """Open ``path`` for writing, or pass an already open text stream through."""
    if hasattr(path, "write"):
        return contextlib.nullcontext(path)
    return open(path, "w", newline="")


def _encoder(f):
    return f.embed if hasattr(f, "embed") else f


def _embed_rows(f, x: np.ndarray) -> np.ndarray:
    out = np.asarray(_encoder(f)(x))
    return out.reshape(len(x), -1)


def tau(f, x, n) -> float:
    """Drift ratio ``||f(x + n) - f(x)|| / ||f(x)||`` for one image."""
    x = np.asarray(x)
    n = np.asarray(n)
    if x.shape != n.shape:
        raise ValueError(f"noise shape {n.shape} does not match image shape {x.shape}")
    enc = _encoder(f)
    anchor = np.asarray(enc(x)).ravel()
    norm = float(np.linalg.norm(anchor))
    if norm < ag.EPS_DIV:
        raise DegenerateInputError("degenerate anchor: ||f(x)|| < 1e-12")
    if not np.any(n):
        return 0.0
    return float(np.linalg.norm(np.asarray(enc(x + n)).ravel() - anchor)) / norm


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) == 0:
        raise ValueError("epsilon grid must be a nonempty 1-D sequence")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("epsilon grid must be positive and strictly increasing")
    return grid


def _tau_draws(f, x: np.ndarray, grid: np.ndarray, trials: int, seed: int, indices: np.ndarray) -> np.ndarray:
    """``[G, B, trials]`` tau values; noise stream ``g * trials + t`` per sample index."""
    anchor = _embed_rows(f, x)
    norm = np.linalg.norm(anchor, axis=1)
    out = np.empty((len(grid), len(x), trials))
    for g, eps in enumerate(grid):
        for t in range(trials):
            noise = uniform_noise(seed, indices, x.shape[1:], eps, stream=g * trials + t)
            drift = _embed_rows(f, x + noise) - anchor
            out[g, :, t] = np.linalg.norm(drift, axis=1) / norm
    return out


def _usable(f, x: np.ndarray, what: str) -> np.ndarray:
    norm = np.linalg.norm(_embed_rows(f, x), axis=1)
    ok = norm >= ag.EPS_DIV
    if not np.all(ok):
        warnings.warn(f"skipped {int((~ok).sum())} {what} image(s) with degenerate anchors", stacklevel=3)
    return ok


@dataclass
class TauScanResult:
    """Tau statistics per noise strength for clean images and their attacked versions.

    ``clean_samples`` / ``adv_samples`` hold per-image means over trials
    (``[G, n]``) so paired comparisons can be made on the same images.
    """

    epsilon_grid: list[float]
    clean_means: list[float]
    clean_stds: list[float]
    adv_means: list[float]
    adv_stds: list[float]
    sample_count: int
    attack_cfg: AttackConfig | None
    trials: int = DEFAULT_TRIALS
    skipped: int = 0
    clean_samples: np.ndarray | None = field(default=None, repr=False)
    adv_samples: np.ndarray | None = field(default=None, repr=False)

    def paired_difference(self, g: int) -> tuple[float, float]:
        """Mean and standard error of per-image ``clean - adv`` at grid point ``g``."""
        d = self.clean_samples[g] - self.adv_samples[g]
        se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else float("inf")
        return float(d.mean()), se

    def rows(self) -> list[dict]:
        return [{"epsilon": e, "clean_mean": cm, "clean_std": cs, "adv_mean": am, "adv_std": a_s,
                 "n": self.sample_count * self.trials}
                for e, cm, cs, am, a_s in zip(self.epsilon_grid, self.clean_means, self.clean_stds,
                                               self.adv_means, self.adv_stds)]

    def to_csv(self, path) -> None:
        with _open_out(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCAN_COLUMNS)
            for r in self.rows():
                w.writerow([f"{r['epsilon']:.8f}", f"{r['clean_mean']:.8f}", f"{r['clean_std']:.8f}",
                            f"{r['adv_mean']:.8f}", f"{r['adv_std']:.8f}", r["n"]])


def tau_scan(f, images, labels, attack_cfg: AttackConfig | None = None, epsilon_grid=DEFAULT_GRID,
             trials: int = DEFAULT_TRIALS, seed: int = 0, attack_model=None, adv_images=None) -> TauScanResult:
    """Mean tau over images x trials for clean images and their attacked counterparts.

    The attack targets ``attack_model`` (default: ``f`` itself, which must then
    be a classifier); precomputed ``adv_images`` skip the attack. Clean and
    adversarial columns use the same images and the same noise draws.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1 (empty statistics)")
    grid = _check_grid(epsilon_grid)
    x = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(x) == 0:
        raise ValueError("no images to scan")
    indices = np.arange(len(x), dtype=np.int64)
    if adv_images is None:
        attack_cfg = attack_cfg or AttackConfig()
        victim = attack_model if attack_model is not None else f
        adv = run_attack(victim, x, labels, attack_cfg, indices)
    else:
        adv = np.asarray(adv_images, dtype=np.float32)
        if adv.shape != x.shape:
            raise ValueError("adv_images must match images in shape")
    keep = _usable(f, x, "clean") & _usable(f, adv, "adversarial")
    skipped = int((~keep).sum())
    if not np.any(keep):
        raise DegenerateInputError("every anchor is degenerate")
    idx = indices[keep]
    clean = _tau_draws(f, x[keep], grid, trials, seed, idx)
    advt = _tau_draws(f, adv[keep], grid, trials, seed, idx)
    n = int(keep.sum())
    ddof = 1 if n * trials > 1 else 0
    flat_c = clean.reshape(len(grid), -1)
    flat_a = advt.reshape(len(grid), -1)
    return TauScanResult(
        epsilon_grid=[float(e) for e in grid],
        clean_means=[float(v) for v in flat_c.mean(axis=1)],
        clean_stds=[float(v) for v in flat_c.std(axis=1, ddof=ddof)],
        adv_means=[float(v) for v in flat_a.mean(axis=1)],
        adv_stds=[float(v) for v in flat_a.std(axis=1, ddof=ddof)],
        sample_count=n, attack_cfg=attack_cfg, trials=trials, skipped=skipped,
        clean_samples=clean.mean(axis=2), adv_samples=advt.mean(axis=2))


# ---------------------------------------------------------------- Jacobian


def _as64(f, x) -> np.ndarray:
    return np.asarray(_encoder(f)(np.asarray(x, dtype=np.float64)), dtype=np.float64)


def linearized_drift(f, x, n, h: float = JVP_STEP) -> np.ndarray:
    """``||J_f(x) n||`` per sample from a forward difference ``(f(x + h n) - f(x)) / h`` in float64."""
    x = np.asarray(x, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    base = _as64(f, x)
    jvp = (_as64(f, x + h * n) - base) / h
    if jvp.ndim <= 1:
        return np.asarray(np.linalg.norm(jvp))
    return np.linalg.norm(jvp.reshape(len(jvp), -1), axis=1)


@dataclass
class DriftCheck:
    exact_drift: float
    linearized_drift: float
    rel_gap: float


def jacobian_drift_check(f, x, n_small, h: float = JVP_STEP) -> DriftCheck:
    """Compare the exact drift ``||f(x+n) - f(x)||`` with its first-order estimate ``||J n||``."""
    n = np.asarray(n_small, dtype=np.float64)
    if np.max(np.abs(n), initial=0.0) > 1e-2:
        raise ValueError("jacobian_drift_check expects ||n||_inf <= 1e-2")
    if not np.any(n):
        return DriftCheck(0.0, 0.0, 0.0)
    x = np.asarray(x, dtype=np.float64)
    exact = float(np.linalg.norm(_as64(f, x + n) - _as64(f, x)))
    lin = float(linearized_drift(f, x, n, h))
    if lin == 0.0:
        gap = 0.0 if exact == 0.0 else float("inf")
    else:
        gap = abs(exact - lin) / lin
    return DriftCheck(exact, lin, gap)


@dataclass
class ActivationComparison:
    mean_clean_activation: float
    mean_adv_activation: float
    clean_samples: np.ndarray = field(repr=False)
    adv_samples: np.ndarray = field(repr=False)

    def paired_z(self) -> float:
        """Mean of per-sample ``clean - adv`` over its standard error."""
        d = self.clean_samples - self.adv_samples
        se = d.std(ddof=1) / np.sqrt(len(d)) if len(d) > 1 else 0.0
        if se == 0:
            return 0.0 if d.mean() == 0 else float(np.sign(d.mean()) * np.inf)
        return float(d.mean() / se)


def jacobian_activation_compare(f, x_clean, x_adv, trials: int = DEFAULT_TRIALS, epsilon: float = 1 / 255,
                                seed: int = 0) -> ActivationComparison:
    """Estimate ``E_n ||J_f n||`` at clean and adversarial points with shared uniform noises."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    xc = np.asarray(x_clean, dtype=np.float64)
    xa = np.asarray(x_adv, dtype=np.float64)
    if xc.shape != xa.shape:
        raise ValueError("clean and adversarial batches must have the same shape")
    idx = np.arange(len(xc), dtype=np.int64)
    acc_c = np.zeros(len(xc))
    acc_a = np.zeros(len(xc))
    for t in range(trials):
        n = uniform_noise(seed, idx, xc.shape[1:], epsilon, stream=t).astype(np.float64)
        acc_c += linearized_drift(f, xc, n)
        acc_a += linearized_drift(f, xa, n)
    acc_c /= trials
    acc_a /= trials
    return ActivationComparison(float(acc_c.mean()), float(acc_a.mean()), acc_c, acc_a)


# ---------------------------------------------------------------- sensitivity


@dataclass
class SensitivityReport:
    names: list[str]
    epsilon_grid: list[float]
    means: list[list[float]]
    stds: list[list[float]]
    samples: list[np.ndarray] = field(default_factory=list, repr=False)

    def row(self, name: str) -> list[float]:
        return self.means[self.names.index(name)]

    def to_csv(self, path) -> None:
        with _open_out(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["encoder"] + [f"{e:.8f}" for e in self.epsilon_grid])
            for name, row in zip(self.names, self.means):
                w.writerow([name] + [f"{v:.8f}" for v in row])


def encoder_sensitivity_report(encoders, images, epsilon_grid=DEFAULT_GRID, seed: int = 0,
                               trials: int = DEFAULT_TRIALS) -> SensitivityReport:
    """Mean clean-image tau per encoder per noise strength.

    ``encoders`` is a list of ``(name, encoder)`` pairs or a mapping. Noise
    draws match ``tau_scan`` for the same seed, so one encoder reproduces its
    clean column.
    """
    pairs = list(encoders.items()) if isinstance(encoders, dict) else list(encoders)
    if not pairs:
        raise ValueError("need at least one encoder")
    grid = _check_grid(epsilon_grid)
    x = np.asarray(images, dtype=np.float32)
    idx = np.arange(len(x), dtype=np.int64)
    names, means, stds, samples = [], [], [], []
    for name, f in pairs:
        keep = _usable(f, x, f"{name} clean")
        draws = _tau_draws(f, x[keep], grid, trials, seed, idx[keep])
        flat = draws.reshape(len(grid), -1)
        names.append(str(name))
        means.append([float(v) for v in flat.mean(axis=1)])
        stds.append([float(v) for v in flat.std(axis=1, ddof=1 if flat.shape[1] > 1 else 0)])
        samples.append(draws.mean(axis=2))
    return SensitivityReport(names, [float(e) for e in grid], means, stds, samples)

