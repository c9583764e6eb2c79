"""L-infinity bounded attacks against the dual encoder.

All attacks share one signed-gradient ascent loop over a batch: the losses are
summed over samples, so one backward pass yields every per-sample gradient.
Random starts draw from a per-sample stream split from ``cfg.seed``, which makes
outputs independent of how samples are batched.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .utils import check_images, check_labels, sample_indices, uniform_noise

logger = logging.getLogger(__name__)

METHODS = ("pgd_ce", "cw", "feature", "adaptive")
SECOND_ORDER = ("fd", "none")


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters of one attack.

    ``eta`` and ``epsilon_ttc_assumed`` are only read by the adaptive attack;
    ``eta=None`` calibrates the simulated counterattack step per sample so that
    its largest coordinate equals ``epsilon_ttc_assumed`` at the first step.
    """

    method: str = "pgd_ce"
    epsilon: float = 1 / 255
    alpha: float = 1 / 1020
    steps: int = 10
    random_start: bool = False
    seed: int = 0
    eta: float | None = None
    epsilon_ttc_assumed: float = 4 / 255
    second_order: str = "fd"
    fd_step: float = 1e-3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.steps >= 1:
            if self.epsilon <= 0:
                raise ValueError("epsilon must be positive when steps >= 1")
            if self.alpha <= 0:
                raise ValueError("alpha must be positive")
            if self.alpha > self.epsilon:
                warnings.warn(f"attack step {self.alpha} exceeds budget {self.epsilon}", stacklevel=3)
        if self.method == "adaptive":
            if self.eta is not None and self.eta <= 0:
                raise ValueError("eta must be positive")
            if self.epsilon_ttc_assumed <= 0:
                raise ValueError("epsilon_ttc_assumed must be positive")
            if self.second_order not in SECOND_ORDER:
                raise ValueError(f"second_order must be one of {SECOND_ORDER}")

    def to_dict(self) -> dict:
        return asdict(self)


def linf_project(delta, epsilon: float) -> np.ndarray:
    """Clamp every coordinate of ``delta`` to ``[-epsilon, epsilon]``."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    delta = np.asarray(delta)
    eps = delta.dtype.type(epsilon) if delta.dtype.kind == "f" else epsilon
    return np.clip(delta, -eps, eps)


def clamp_image(x) -> np.ndarray:
    """Clamp pixels to ``[0, 1]``."""
    x = np.asarray(x)
    return np.clip(x, x.dtype.type(0), x.dtype.type(1))


def _step_in_box(x: np.ndarray, delta: np.ndarray, epsilon: float) -> np.ndarray:
    delta = linf_project(delta, epsilon)
    return clamp_image(x + delta) - x


# ---------------------------------------------------------------- losses


def ce_loss(model, xt: Tensor, labels) -> Tensor:
    return ag.softmax_cross_entropy(model.scores_tensor(xt), labels, reduction="sum")


def margin_loss(model, xt: Tensor, labels) -> Tensor:
    """Summed ``max_{i != y} s_i - s_y``."""
    s = model.scores_tensor(xt)
    labels = np.asarray(labels)
    mask = np.zeros(s.shape, dtype=s.dtype)
    mask[np.arange(s.shape[0]), labels] = -1e9
    best_other = ag.amax(ag.add(s, mask), axis=-1)
    return ag.sum(ag.sub(best_other, ag.take(s, labels)))


def feature_loss(model, xt: Tensor, anchor: np.ndarray) -> Tensor:
    """Summed L2 distance between embeddings and a constant anchor."""
    emb = model.encode_tensor(xt)
    return ag.sum(ag.l2_norm(ag.sub(emb, ag.stop_gradient(Tensor(anchor))), axis=-1))


def per_sample_loss(model, x, labels, method: str) -> np.ndarray:
    """Loss value of each sample (no gradients); ``feature`` needs the clean batch as ``labels``."""
    x = np.asarray(x, dtype=np.float32)
    if method == "pgd_ce":
        return ag.softmax_cross_entropy(model.scores_tensor(Tensor(x)), labels, reduction="none").data
    if method == "cw":
        s = model.scores_tensor(Tensor(x)).data
        labels = np.asarray(labels)
        rows = np.arange(len(labels))
        other = s.copy()
        other[rows, labels] = -np.inf
        return other.max(axis=1) - s[rows, labels]
    if method == "feature":
        return np.linalg.norm(model.embed(x) - model.embed(labels), axis=-1)
    raise ValueError(f"no per-sample loss for {method!r}")


def loss_gradient(model, x: np.ndarray, delta: np.ndarray, loss_fn) -> np.ndarray:
    """Gradient of ``loss_fn(model, x + delta)`` with respect to ``delta``."""
    d = Tensor(delta, requires_grad=True)
    with Tape() as tape:
        loss = loss_fn(model, ag.add(Tensor(x), d))
    tape.backward(loss)
    return d.grad if d.grad is not None else np.zeros_like(delta)


def sign_ascent(x: np.ndarray, delta: np.ndarray, grad_fn, epsilon: float, alpha: float,
                steps: int) -> np.ndarray:
    """Projected signed-gradient ascent from ``delta``; returns the final delta."""
    a = np.float32(alpha)
    for step in range(steps):
        g = grad_fn(delta, step)
        delta = _step_in_box(x, delta + a * np.sign(g).astype(np.float32), epsilon)
    return delta


def _start(x, cfg: AttackConfig, indices) -> np.ndarray:
    if cfg.random_start and cfg.steps > 0:
        return _step_in_box(x, uniform_noise(cfg.seed, indices, x.shape[1:], cfg.epsilon), cfg.epsilon)
    return np.zeros_like(x)


def _finish(x, delta, single):
    out = clamp_image(x + delta)
    return out[0] if single else out


def _prepare(model, x, label, cfg, method, indices):
    if cfg.method != method:
        raise ValueError(f"config method {cfg.method!r} used with {method!r} attack")
    xb, single = check_images(x, model.arch.image_shape)
    labels = None if label is None else check_labels(label, len(xb), model.arch.n_classes)
    return xb, labels, single, sample_indices(len(xb), indices)


def pgd_attack(model, x, label, cfg: AttackConfig, indices=None) -> np.ndarray:
    """Untargeted sign-PGD maximising the cross-entropy of the true class."""
    xb, labels, single, idx = _prepare(model, x, label, cfg, "pgd_ce", indices)
    loss = lambda m, xt: ce_loss(m, xt, labels)  # noqa: E731
    delta = sign_ascent(xb, _start(xb, cfg, idx), lambda d, _: loss_gradient(model, xb, d, loss),
                        cfg.epsilon, cfg.alpha, cfg.steps)
    return _finish(xb, delta, single)


def cw_attack(model, x, label, cfg: AttackConfig, indices=None) -> np.ndarray:
    """Sign-PGD on the margin ``max_{i != y} s_i - s_y``."""
    xb, labels, single, idx = _prepare(model, x, label, cfg, "cw", indices)
    loss = lambda m, xt: margin_loss(m, xt, labels)  # noqa: E731
    delta = sign_ascent(xb, _start(xb, cfg, idx), lambda d, _: loss_gradient(model, xb, d, loss),
                        cfg.epsilon, cfg.alpha, cfg.steps)
    return _finish(xb, delta, single)


def feature_attack(model, x, cfg: AttackConfig, indices=None) -> np.ndarray:
    """Label-free attack pushing the embedding away from the clean embedding.

    Without a random start the drift gradient at ``delta = 0`` is zero, so the
    attack only moves when ``random_start`` is set.
    """
    xb, _, single, idx = _prepare(model, x, None, cfg, "feature", indices)
    anchor = model.embed(xb)
    loss = lambda m, xt: feature_loss(m, xt, anchor)  # noqa: E731
    delta = sign_ascent(xb, _start(xb, cfg, idx), lambda d, _: loss_gradient(model, xb, d, loss),
                        cfg.epsilon, cfg.alpha, cfg.steps)
    return _finish(xb, delta, single)


# ---------------------------------------------------------------- adaptive


def drift_gradient(model, x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """``grad_delta ||f(x + delta) - f(x)||`` with the anchor held constant."""
    anchor = model.embed(x)
    return loss_gradient(model, x, delta, lambda m, xt: feature_loss(m, xt, anchor))


def _drift_input_gradient(model, x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """``grad_x ||f(x + delta) - f(x)||`` through both the shifted and the anchor branch."""
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        drift = ag.sub(model.encode_tensor(ag.add(xt, Tensor(delta))), model.encode_tensor(xt))
        loss = ag.sum(ag.l2_norm(drift, axis=-1))
    tape.backward(loss)
    return xt.grad


def adaptive_objective_gradient(model, xs: np.ndarray, labels, delta0: np.ndarray, eta: np.ndarray,
                                second_order: str = "fd", fd_step: float = 1e-3) -> np.ndarray:
    """Gradient in ``xs`` of ``CE(scores(xs + delta0 + eta * g(xs)), y)``.

    ``g`` is the one-step counterattack direction. The curvature term
    ``(dg/dxs)^T v`` is a central difference of the input-gradient of the drift
    along ``v`` (``second_order="fd"``) or dropped (``"none"``).
    """
    eta_b = eta.reshape((-1,) + (1,) * (xs.ndim - 1)).astype(np.float32)
    g = drift_gradient(model, xs, delta0)
    u = xs + delta0 + eta_b * g
    v = loss_gradient(model, u, np.zeros_like(u), lambda m, xt: ce_loss(m, xt, labels))
    if second_order == "none":
        return v
    x64 = xs.astype(np.float64)
    d64 = delta0.astype(np.float64)
    v64 = v.astype(np.float64)
    axes = tuple(range(1, xs.ndim))
    vnorm = np.sqrt(np.sum(v64 * v64, axis=axes, keepdims=True))
    direction = np.where(vnorm > 0, v64 / np.where(vnorm > 0, vnorm, 1), 0)
    hi = _drift_input_gradient(model, x64, d64 + fd_step * direction)
    lo = _drift_input_gradient(model, x64, d64 - fd_step * direction)
    curvature = (hi - lo) / (2 * fd_step) * vnorm
    return (v64 + eta_b.astype(np.float64) * curvature).astype(np.float32)


def calibrate_eta(model, x: np.ndarray, delta0: np.ndarray, epsilon_ttc: float) -> np.ndarray:
    """Per-sample step making ``max|eta * g|`` equal ``epsilon_ttc``."""
    g = drift_gradient(model, x, delta0)
    gmax = np.abs(g).reshape(len(x), -1).max(axis=1)
    return np.where(gmax > 0, epsilon_ttc / np.where(gmax > 0, gmax, 1), 0).astype(np.float32)


def adaptive_attack(model, x, label, cfg: AttackConfig, indices=None) -> np.ndarray:
    """Sign-PGD against a one-step simulation of the counterattack defense.

    The simulated counterattack noise is redrawn at every attack step from a
    per-sample stream (stream ``step + 1``) split from ``cfg.seed``.
    """
    xb, labels, single, idx = _prepare(model, x, label, cfg, "adaptive", indices)
    state = {}

    def grad_fn(delta, step):
        xs = clamp_image(xb + delta)
        delta0 = uniform_noise(cfg.seed, idx, xb.shape[1:], cfg.epsilon_ttc_assumed, stream=step + 1)
        if "eta" not in state:
            state["eta"] = (np.full(len(xb), cfg.eta, dtype=np.float32) if cfg.eta is not None
                            else calibrate_eta(model, xs, delta0, cfg.epsilon_ttc_assumed))
        return adaptive_objective_gradient(model, xs, labels, delta0, state["eta"],
                                           cfg.second_order, cfg.fd_step)

    delta = sign_ascent(xb, _start(xb, cfg, idx), grad_fn, cfg.epsilon, cfg.alpha, cfg.steps)
    return _finish(xb, delta, single)


def run_attack(model, x, labels, cfg: AttackConfig, indices=None) -> np.ndarray:
    """Dispatch on ``cfg.method``."""
    if cfg.method == "pgd_ce":
        return pgd_attack(model, x, labels, cfg, indices)
    if cfg.method == "cw":
        return cw_attack(model, x, labels, cfg, indices)
    if cfg.method == "feature":
        return feature_attack(model, x, cfg, indices)
    return adaptive_attack(model, x, labels, cfg, indices)
