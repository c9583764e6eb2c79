"""Independent reference computations used by the tests."""

import itertools

import numpy as np

from ttclab import autograd as ag
from ttclab.model import Architecture


class LinearScores:
    """Score function ``s = W^T vec(x) + b``: linear in the input, no cosine."""

    def __init__(self, n_pixels, n_classes, seed=0):
        rng = np.random.default_rng(seed)
        self.arch = Architecture(1, 1, n_pixels, 0, n_classes, n_classes)
        self.W = rng.normal(size=(n_pixels, n_classes)).astype(np.float64)
        self.b = rng.normal(size=n_classes).astype(np.float64)

    def scores_tensor(self, xt):
        flat = ag.reshape(xt, (xt.shape[0], -1))
        return ag.add(ag.matmul(flat, ag.Tensor(self.W.astype(xt.dtype))), self.b.astype(xt.dtype))

    def scores_np(self, x):
        return x.reshape(len(x), -1).astype(np.float64) @ self.W + self.b


def ce_np(s, y):
    z = s - s.max(axis=-1, keepdims=True)
    return np.log(np.exp(z).sum(axis=-1)) - z[..., y]


def margin_np(s, y):
    other = np.delete(s, y, axis=-1)
    return other.max(axis=-1) - s[..., y]


def corner_optimum(model, x, y, eps, loss):
    """Max of ``loss`` over all ``x + eps * sign`` corners (pixels clipped to [0, 1])."""
    n = x.size
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=n)))
    cands = np.clip(x.reshape(1, -1) + eps * signs, 0, 1)
    return float(loss(model.scores_np(cands), y).max())


# ---------------------------------------------------------------- operator gradient checks


def away_from(x, points, gap=1e-2, rng=None):
    """Push entries of x at least ``gap`` away from every kink in ``points``."""
    for p in points:
        close = np.abs(x - p) < gap
        x = np.where(close, p + np.sign(x - p + 1e-30) * gap * 1.5, x)
    return x


def op_cases():
    """(name, fn, input sampler) for every differentiable operator."""

    def u(rng, shape):
        return rng.uniform(-2, 2, size=shape)

    def weighted(op, shape_out):
        def build(rng):
            w = rng.normal(size=shape_out)
            return lambda *ts: ag.sum(ag.mul(op(*ts), w))
        return build

    return [
        ("add", weighted(ag.add, (3, 4)), lambda r: [u(r, (3, 4)), u(r, (3, 4))]),
        ("sub", weighted(ag.sub, (3, 4)), lambda r: [u(r, (3, 4)), u(r, (3, 4))]),
        ("mul", weighted(ag.mul, (3, 4)), lambda r: [u(r, (3, 4)), u(r, (3, 4))]),
        ("matmul", weighted(ag.matmul, (3, 2)), lambda r: [u(r, (3, 4)), u(r, (4, 2))]),
        ("relu", weighted(ag.relu, (5,)), lambda r: [away_from(u(r, 5), [0.0])]),
        ("clamp", weighted(lambda t: ag.clamp(t, -1.0, 1.0), (5,)), lambda r: [away_from(u(r, 5), [-1.0, 1.0])]),
        ("softplus", weighted(ag.softplus, (5,)), lambda r: [u(r, 5)]),
        ("mean", weighted(lambda t: ag.mean(t, axis=1), (3,)), lambda r: [u(r, (3, 4))]),
        ("reshape", weighted(lambda t: ag.reshape(t, (2, 6)), (2, 6)), lambda r: [u(r, (3, 4))]),
        ("transpose", weighted(ag.transpose, (4, 3)), lambda r: [u(r, (3, 4))]),
        ("take", weighted(lambda t: ag.take(t, np.array([2, 0, 1])), (3,)), lambda r: [u(r, (3, 4))]),
        ("amax", weighted(lambda t: ag.amax(t, axis=1), (3,)), lambda r: [_spread_rows(r)]),
        ("l2_norm", lambda r: ag.l2_norm, lambda r: [u(r, 6)]),
        ("l2_norm_rows", weighted(lambda t: ag.l2_norm(t, axis=1), (3,)), lambda r: [u(r, (3, 4))]),
        ("normalize", weighted(ag.normalize, (3, 4)), lambda r: [u(r, (3, 4))]),
        ("cosine_similarity", lambda r: ag.cosine_similarity, lambda r: [u(r, 5), u(r, 5)]),
        ("softmax_cross_entropy", _ce_builder, lambda r: [u(r, 4)]),
    ]


def _ce_builder(rng):
    label = int(rng.integers(4))
    return lambda t: ag.softmax_cross_entropy(t, label)


def _spread_rows(rng):
    # rows whose top two entries differ by more than the kink margin
    while True:
        x = rng.uniform(-2, 2, size=(3, 4))
        top = np.sort(x, axis=1)
        if np.all(top[:, -1] - top[:, -2] > 2e-2):
            return x
