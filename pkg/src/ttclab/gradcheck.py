"""Finite-difference checks of the tape gradients on the model's real losses."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .attacks import ce_loss, feature_loss, margin_loss
from .autograd import Tensor
from .model import CLIP_CAP, Architecture, DualEncoder


def small_model(seed: int = 0, activation: str = "relu", logit_scale: float = 10.0) -> DualEncoder:
    """A fresh random encoder small enough for entry-wise central differences."""
    m = DualEncoder.init(Architecture(1, 4, 4, 8, 6, 3), seed=seed, logit_scale=logit_scale)
    m.activation = activation
    rng = np.random.default_rng(seed + 1)
    # nonzero biases so every path of the network is exercised
    m.layers = [(w, rng.normal(0, 0.1, size=b.shape).astype(np.float32)) for w, b in m.layers]
    return m


def _unpack(m: DualEncoder, flat_params: list[Tensor]):
    return list(flat_params[:-1]), flat_params[-1]


def loss_cases(m: DualEncoder, x: np.ndarray, labels: np.ndarray, anchor_delta: np.ndarray):
    """``name -> (fn, inputs)`` pairs covering the attack, training and counterattack objectives."""
    params = [p for layer in m.layers for p in layer] + [m.class_embeddings]
    anchor = m.embed(x.astype(np.float64))

    def ce_x(xt):
        return ce_loss(m, xt, labels)

    def margin_x(xt):
        return margin_loss(m, xt, labels)

    def drift_delta(dt):
        return feature_loss(m, ag.add(Tensor(x), dt), anchor)

    def ce_params(*ps):
        layer_params, emb = _unpack(m, list(ps))
        return ag.softmax_cross_entropy(m.scores_tensor(Tensor(x), layer_params, emb), labels)

    return {
        "pgd_ce_wrt_input": (ce_x, [x]),
        "cw_margin_wrt_input": (margin_x, [x]),
        "ttc_drift_wrt_delta": (drift_delta, [anchor_delta]),
        "train_ce_wrt_params": (ce_params, params),
    }


def _kink_margin(m: DualEncoder, x: np.ndarray) -> float:
    """Smallest distance of a hidden pre-activation from the activation kinks."""
    h = x.reshape(len(x), -1) - m.input_offset
    closest = np.inf
    for w, b in m.layers[:-1]:
        pre = h @ w.astype(np.float64) + b
        closest = min(closest, float(np.abs(pre).min()))
        if m.activation == "clipped_relu":
            closest = min(closest, float(np.abs(pre - CLIP_CAP).min()))
        h = np.maximum(pre, 0)
    return closest


def _runner_up_gap(m: DualEncoder, x: np.ndarray, labels) -> float:
    """Gap between the two best wrong-class scores (the margin loss has a kink at a tie)."""
    s = m.scores(x.astype(np.float64))
    s[np.arange(len(s)), labels] = -np.inf
    top = np.sort(s, axis=1)[:, -2:]
    return float((top[:, 1] - top[:, 0]).min())


def run_gradcheck(m: DualEncoder | None = None, cases: int = 20, seed: int = 0, h: float = 1e-3) -> dict[str, float]:
    """Worst norm-wise relative error per objective over ``cases`` random inputs.

    Central differences are meaningless across a ReLU kink, so inputs whose
    hidden pre-activations lie within reach of a kink (or whose best two
    wrong-class scores nearly tie, or whose drift is near the kink of the
    L2 norm at zero) are redrawn.
    """
    m = m or small_model(seed)
    rng = np.random.default_rng(seed)
    reach = 10 * h * max(1.0, max(float(np.abs(w).sum(axis=0).max()) for w, _ in m.layers))
    worst: dict[str, float] = {}
    done = 0
    while done < cases:
        x = rng.uniform(0.05, 0.95, size=(2,) + m.arch.image_shape)
        labels = rng.integers(0, m.arch.n_classes, size=2)
        delta = rng.uniform(-0.2, 0.2, size=x.shape)
        if m.activation != "softplus" and min(_kink_margin(m, x), _kink_margin(m, x + delta)) < reach:
            continue
        if _runner_up_gap(m, x, labels) < 1e-2:
            continue
        if np.linalg.norm(m.embed(x + delta) - m.embed(x), axis=1).min() < 1e-2:
            continue
        done += 1
        for name, (fn, inputs) in loss_cases(m, x, labels, delta).items():
            err = ag.gradcheck(fn, inputs, h=h, mode="norm")
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
