"""Test-time defenses: tau-thresholded weighted counterattacks and baselines.

Every defense returns an additive perturbation; the defended image is
``clamp_image(x + delta)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .attacks import clamp_image, drift_gradient, linf_project, loss_gradient, sign_ascent
from .autograd import DegenerateInputError
from .utils import check_images, sample_indices, uniform_noise

TAU_ENCODERS = ("deployed", "original")


def exp_weights(N: int, beta: float) -> list[float]:
    """Softmax weights ``exp(beta * j) / sum_i exp(beta * i)`` for ``j = 0..N``."""
    if N < 0:
        raise ValueError("N must be >= 0")
    z = beta * np.arange(N + 1, dtype=np.float64)
    e = np.exp(z - z.max())
    return list(e / e.sum())


@dataclass(frozen=True)
class CounterattackConfig:
    """Counterattack hyperparameters.

    ``alpha=None`` resolves to ``2 * epsilon / steps``. ``tau_thres=0``
    disables halting.
    """

    epsilon: float = 4 / 255
    alpha: float | None = None
    steps: int = 2
    tau_thres: float = 0.2
    beta: float = 2.0
    seed: int = 0
    tau_encoder: str = "original"
    use_sign: bool = True

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.tau_thres < 0:
            raise ValueError("tau_thres must be >= 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.tau_encoder not in TAU_ENCODERS:
            raise ValueError(f"tau_encoder must be one of {TAU_ENCODERS}")

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 2 * self.epsilon / self.steps if self.steps else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = self.step_size
        return d


@dataclass
class DefenseOutcome:
    delta_ttc: np.ndarray
    tau_value: float
    halted: bool
    step_deltas: list[np.ndarray] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)


@dataclass
class BatchDefenseOutcome:
    """Batched counterattack result; ``step_deltas`` is ``[N + 1, B, ...]`` when recorded."""

    delta_ttc: np.ndarray
    tau: np.ndarray
    halted: np.ndarray
    step_deltas: np.ndarray | None = None
    weights: list[float] = field(default_factory=list)

    def outcome(self, i: int) -> DefenseOutcome:
        steps = [] if self.step_deltas is None else [d[i] for d in self.step_deltas]
        if self.halted[i]:
            return DefenseOutcome(self.delta_ttc[i], float(self.tau[i]), True, steps[:1], [1.0])
        return DefenseOutcome(self.delta_ttc[i], float(self.tau[i]), False, steps, list(self.weights))


def _axes(x):
    return tuple(range(1, x.ndim))


def tau_ratio(f, x: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """``||f(x + n) - f(x)|| / ||f(x)||`` per sample for a batch ``x``."""
    anchor = f(x).reshape(len(x), -1)
    norm = np.linalg.norm(anchor, axis=1)
    if np.any(norm < ag.EPS_DIV):
        raise DegenerateInputError("degenerate anchor: ||f(x)|| < 1e-12")
    drift = f(x + noise).reshape(len(x), -1) - anchor
    return np.linalg.norm(drift, axis=1) / norm


def rn_defend(x, epsilon: float, seed: int, indices=None, image_shape=None) -> np.ndarray:
    """Uniform ``U(-epsilon, epsilon)`` perturbation, one stream per sample."""
    x = np.asarray(x, dtype=np.float32)
    if image_shape is None:
        single = x.ndim == 3
        xb = x[None] if single else x
    else:
        xb, single = check_images(x, image_shape)
    noise = uniform_noise(seed, sample_indices(len(xb), indices), xb.shape[1:], epsilon)
    return noise[0] if single else noise


def ttc_defend_batch(m_deployed, m_tau, x, cfg: CounterattackConfig, indices=None,
                     record_steps: bool = False) -> BatchDefenseOutcome:
    """Tau-thresholded weighted counterattack on a batch.

    ``m_tau`` computes the halt statistic with the probe noise ``delta^0``;
    ``m_deployed`` drives the counterattack steps.
    """
    xb, _ = check_images(x, m_deployed.arch.image_shape)
    idx = sample_indices(len(xb), indices)
    delta = uniform_noise(cfg.seed, idx, xb.shape[1:], cfg.epsilon)
    tau = tau_ratio(m_tau.embed, xb, delta)
    halted = (tau >= cfg.tau_thres) if cfg.tau_thres > 0 else np.zeros(len(xb), dtype=bool)
    weights = exp_weights(cfg.steps, cfg.beta)
    steps = [delta]
    active = np.flatnonzero(~halted)
    if cfg.steps > 0 and len(active):
        xa = xb[active]
        anchor = m_deployed.embed(xa)
        if np.any(np.linalg.norm(anchor, axis=1) < ag.EPS_DIV):
            raise DegenerateInputError("degenerate anchor: ||f(x)|| < 1e-12")
        alpha = np.float32(cfg.step_size)
        current = delta[active]
        acc = weights[0] * current.astype(np.float64)
        for j in range(1, cfg.steps + 1):
            g = drift_gradient(m_deployed, xa, current)
            step = np.sign(g).astype(np.float32) if cfg.use_sign else g.astype(np.float32)
            current = linf_project(current + alpha * step, cfg.epsilon)
            acc += weights[j] * current.astype(np.float64)
            if record_steps:
                full = delta.copy()
                full[active] = current
                steps.append(full)
        out = delta.copy()
        out[active] = linf_project(acc.astype(np.float32), cfg.epsilon)
    else:
        out = delta.copy()
        if record_steps:
            steps.extend(delta.copy() for _ in range(cfg.steps))
    return BatchDefenseOutcome(out, tau, halted, np.stack(steps) if record_steps else None, weights)


def ttc_defend(m_deployed, m_tau, x, cfg: CounterattackConfig, index: int = 0) -> DefenseOutcome:
    """Single-image counterattack returning the full per-step record."""
    xb, single = check_images(x, m_deployed.arch.image_shape)
    if not single:
        raise ValueError("ttc_defend takes one image; use ttc_defend_batch for batches")
    return ttc_defend_batch(m_deployed, m_tau, xb, cfg, [index], record_steps=True).outcome(0)


@dataclass(frozen=True)
class PerturbationDefenseConfig:
    """Budget and schedule of the Anti-adversary / Hedge baselines.

    ``alpha=None`` resolves to ``alpha_factor * epsilon / steps``.
    """

    epsilon: float = 4 / 255
    steps: int = 2
    alpha: float | None = None
    alpha_factor: float = 2.0
    random_start: bool = False
    seed: int = 0

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return self.alpha_factor * self.epsilon / max(self.steps, 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = self.step_size
        return d


def anti_adversary_config(**kw) -> PerturbationDefenseConfig:
    return PerturbationDefenseConfig(**{"steps": 2, "alpha_factor": 2.0, "random_start": False, **kw})


def hedge_config(**kw) -> PerturbationDefenseConfig:
    return PerturbationDefenseConfig(**{"steps": 20, "alpha_factor": 2.5, "random_start": True, **kw})


def _perturbation_defense(m, x, cfg: PerturbationDefenseConfig, loss_fn, indices):
    xb, single = check_images(x, m.arch.image_shape)
    idx = sample_indices(len(xb), indices)
    if cfg.random_start and cfg.epsilon > 0:
        start = clamp_image(xb + uniform_noise(cfg.seed, idx, xb.shape[1:], cfg.epsilon)) - xb
    else:
        start = np.zeros_like(xb)
    if cfg.epsilon == 0:
        delta = np.zeros_like(xb)
    else:
        target = loss_fn(xb)
        delta = sign_ascent(xb, start, lambda d, _: loss_gradient(m, xb, d, target),
                            cfg.epsilon, cfg.step_size, cfg.steps)
    return delta[0] if single else delta


def anti_adversary_defend(m, x, cfg: PerturbationDefenseConfig | None = None, indices=None) -> np.ndarray:
    """Raise the cosine score of the currently predicted class."""
    cfg = cfg or anti_adversary_config()

    def loss_for(xb):
        pred = m.predict(xb)
        return lambda model, xt: ag.sum(ag.take(model.scores_tensor(xt), pred))

    return _perturbation_defense(m, x, cfg, loss_for, indices)


def hedge_defend(m, x, cfg: PerturbationDefenseConfig | None = None, indices=None) -> np.ndarray:
    """Raise the cross-entropy summed over every candidate class."""
    cfg = cfg or hedge_config()
    K = m.arch.n_classes

    def loss_for(xb):
        def loss(model, xt):
            s = model.scores_tensor(xt)
            total = None
            for k in range(K):
                term = ag.softmax_cross_entropy(s, np.full(len(xb), k), reduction="sum")
                total = term if total is None else ag.add(total, term)
            return total
        return loss

    return _perturbation_defense(m, x, cfg, loss_for, indices)


# ---------------------------------------------------------------- TTE


def _nearest_resize(img: np.ndarray, W: int, H: int) -> np.ndarray:
    rows = (np.arange(W) * img.shape[-2]) // W
    cols = (np.arange(H) * img.shape[-1]) // H
    return img[..., rows[:, None], cols[None, :]]


def tte_views(x) -> list[np.ndarray]:
    """Nine deterministic views of a ``[C, W, H]`` image (or a batch).

    The set is the four 7/8-side corner crops rescaled by nearest neighbour,
    the flip of each crop, and the flip of the full image. Order: top-left
    crop, its flip, top-right, its flip, bottom-left, its flip, bottom-right,
    its flip, then the flipped full image. Flips mirror the width axis.
    """
    x = np.asarray(x)
    W, H = x.shape[-2], x.shape[-1]
    if W < 8 or H < 8:
        raise ValueError(f"image {W}x{H} too small for TTE views (need at least 8x8)")
    cw, ch = (7 * W) // 8, (7 * H) // 8
    corners = [(0, 0), (0, H - ch), (W - cw, 0), (W - cw, H - ch)]
    views = []
    for r, c in corners:
        crop = _nearest_resize(x[..., r:r + cw, c:c + ch], W, H)
        views += [crop, _flip(crop)]
    return views + [_flip(x)]


def _flip(v: np.ndarray) -> np.ndarray:
    return v[..., ::-1, :]


def tte_proba(m, x) -> np.ndarray:
    views = tte_views(np.asarray(x, dtype=np.float32))
    return np.mean([m.predict_proba(np.ascontiguousarray(v)) for v in views], axis=0)


def tte_classify(m, x):
    """Argmax of the softmax probabilities averaged over the nine views."""
    return np.argmax(tte_proba(m, x), axis=-1)


def defended_images(x, delta) -> np.ndarray:
    return clamp_image(np.asarray(x, dtype=np.float32) + delta)
