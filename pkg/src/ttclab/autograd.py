"""Small reverse-mode differentiation engine over dense numpy tensors.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient. ``Tape.backward`` walks the recorded nodes in
reverse insertion order, which is already a topological order because a node
can only be recorded after its parents exist.

Only the operators needed by the classifier, attack and counterattack losses
are provided. Tensors default to float32; float64 inputs stay float64 so that
gradient checks can run with a tight finite-difference oracle.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

EPS_DIV = 1e-12

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """A norm used as a denominator is (numerically) zero."""


class TapeError(RuntimeError):
    """Misuse of the tape, e.g. backward from a non-scalar."""


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    # float64 arrays stay float64 (used by oracles); python scalars and lists become float32
    if arr.dtype == np.float64 and isinstance(value, (np.ndarray, np.generic)):
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """Dense array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Records operations for one forward pass; discarded after ``backward``.

    Use as a context manager::

        with Tape() as tape:
            loss = l2_norm(x - y)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.frozen = False
        self._ids: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)
        self.frozen = True

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        if self.frozen:
            raise TapeError("cannot record on a frozen tape")
        node = _Node(out, parents, backward)
        out._node = node
        self.nodes.append(node)
        self._ids.add(id(out))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._ids

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every tensor reachable from the scalar ``loss``.

        Gradients accumulate into leaves that already carry a ``grad``.
        """
        if loss.data.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss not in self and not loss.requires_grad:
            raise TapeError("loss is not recorded on this tape")
        self.frozen = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape).astype(parent.dtype, copy=False)
                if parent.grad is None:
                    parent.grad = pg.copy()
                else:
                    parent.grad = parent.grad + pg


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Backpropagate ``loss`` on ``tape`` (defaults to the active tape)."""
    tape = tape or active_tape()
    if tape is None:
        raise TapeError("no active tape")
    tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data)
    tape = active_tape()
    if needs and tape is not None:
        out.requires_grad = True
        tape.record(out, tuple(parents), backward_fn)
    return out


def _binary(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; zero gradient outside the open interval."""
    mask = (a.data > lo) & (a.data < hi)
    out = np.clip(a.data, a.dtype.type(lo), a.dtype.type(hi))
    return _make(out, (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(a.dtype)
    sig = (0.5 * (1 + np.tanh(0.5 * x))).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * sig,))


def stop_gradient(a: Tensor) -> Tensor:
    """Same values, detached from the tape."""
    return Tensor(a.data.copy())


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,))


def take(a: Tensor, index) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]`` for a 2-D ``a``."""
    idx = np.asarray(index, dtype=np.int64)
    if a.ndim == 1:
        def back(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            return (full,)
        return _make(a.data[idx], (a,), back)
    rows = np.arange(a.shape[0])

    def back(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _make(a.data[rows, idx], (a,), back)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axis), dtype=a.dtype), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def amax(a: Tensor, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximiser."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), back)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        if not (a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[0]):
            raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), back)


def l2_norm(a: Tensor, axis=None) -> Tensor:
    """Euclidean norm; the gradient is ``a / ||a||`` and zero where ``||a|| <= 1e-12``."""
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    safe = np.where(norm > EPS_DIV, norm, 1).astype(a.dtype)
    unit = np.where(norm > EPS_DIV, x / safe, 0).astype(a.dtype)
    out = norm.reshape(()) if axis is None else norm.squeeze(axis)

    def back(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * unit,)

    return _make(np.asarray(out, dtype=a.dtype), (a,), back)


def normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale rows to unit L2 norm; raises on a zero-norm row."""
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    if np.any(norm <= EPS_DIV):
        raise DegenerateInputError("normalize: zero-norm input")
    unit = (x / norm).astype(a.dtype)

    def back(g):
        proj = np.sum(g * unit, axis=axis, keepdims=True)
        return ((g - unit * proj) / norm,)

    return _make(unit, (a,), back)


def cosine_similarity(u: Tensor, v: Tensor, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``u`` and ``v`` along ``axis`` (broadcasting)."""
    u, v = _binary(u, v)
    if u.shape[axis] != v.shape[axis]:
        raise DimensionError(f"cosine_similarity shape mismatch: {u.shape} vs {v.shape}")
    return sum(mul(normalize(u, axis), normalize(v, axis)), axis=axis)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, label, reduction: str = "mean") -> Tensor:
    """``-log softmax(logits)[label]`` with max-subtraction.

    ``logits`` is ``[K]`` with an integer label, or ``[B, K]`` with ``B``
    labels; ``reduction`` in {"mean", "sum", "none"} applies to the batch.
    """
    x = logits.data
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    K = x2.shape[1]
    if labels.shape[0] != x2.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {x2.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= K):
        raise IndexError(f"label out of range [0, {K})")
    z = x2 - x2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(x2.shape[0])
    losses = lse - z[rows, labels]
    probs = softmax(x2, axis=1)
    onehot = np.zeros_like(x2)
    onehot[rows, labels] = 1
    dlogits = probs - onehot

    if reduction == "none":
        out = losses[0] if single else losses

        def back(g):
            g = np.asarray(g).reshape(-1, 1)
            d = dlogits * g
            return (d[0] if single else d,)
    elif reduction in ("mean", "sum"):
        scale = 1.0 / len(labels) if reduction == "mean" else 1.0
        out = losses.sum() * scale

        def back(g):
            d = dlogits * (g * scale)
            return (d[0] if single else d,)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return _make(np.asarray(out, dtype=logits.dtype), (logits,), back)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3,
              eps: float = 1e-8, mode: str = "elementwise") -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps Tensors to a scalar Tensor. ``mode="elementwise"`` scores each
    entry as ``|a - n| / (|n| + eps)``; ``mode="norm"`` scores each input as
    ``||a - n|| / ||n||``, which does not blow up on entries whose true
    gradient is close to zero. Inputs are promoted to float64 so the oracle's
    rounding error stays well below the tolerance.
    """
    if mode not in ("elementwise", "norm"):
        raise ValueError(f"unknown gradcheck mode {mode!r}")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x, requires_grad=True) for x in arrays]
    with Tape() as tape:
        loss = fn(*leaves)
    tape.backward(loss)
    worst = 0.0
    for k, x in enumerate(arrays):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(x)
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*[Tensor(a) for a in arrays]).data)
            flat[i] = orig - h
            fm = float(fn(*[Tensor(a) for a in arrays]).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        if mode == "elementwise":
            err = float((np.abs(analytic - numeric) / (np.abs(numeric) + eps)).max(initial=0.0))
        else:
            scale = float(np.linalg.norm(numeric))
            diff = float(np.linalg.norm(analytic - numeric))
            err = diff / scale if scale > EPS_DIV else diff
        worst = max(worst, err)
    return worst
