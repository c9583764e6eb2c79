"""Dual-encoder zero-shot classifier: an MLP image encoder scored against a
table of class embeddings by scaled cosine similarity.

The class-embedding table stands in for text-encoder outputs, one unit row per
class name. Predictions are the argmax of ``logit_scale * cos(f(x), e_k)``.
"""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import DegenerateInputError, DimensionError, Tape, Tensor

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "softplus", "clipped_relu")
CLIP_CAP = 1.0


@dataclass(frozen=True)
class Architecture:
    """Immutable shape record ``(C, W, H, hidden, embed_dim, n_classes)``.

    ``depth`` hidden layers of width ``hidden`` precede the embedding layer;
    ``hidden == 0`` means a single dense layer from pixels to embedding.
    """

    channels: int
    width: int
    height: int
    hidden: int
    embed_dim: int
    n_classes: int
    depth: int = 1

    def __post_init__(self):
        if min(self.channels, self.width, self.height, self.embed_dim, self.n_classes) < 1:
            raise ValueError("architecture dimensions must be positive")
        if self.hidden < 0 or self.depth < 0:
            raise ValueError("hidden and depth must be nonnegative")

    @property
    def layer_dims(self) -> list[int]:
        hidden = [self.hidden] * self.depth if self.hidden else []
        return [self.n_pixels] + hidden + [self.embed_dim]

    @property
    def n_pixels(self) -> int:
        return self.channels * self.width * self.height

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.width, self.height)

    def as_tuple(self) -> tuple[int, ...]:
        return (self.channels, self.width, self.height, self.hidden, self.embed_dim, self.n_classes)


class DualEncoder:
    """Image encoder parameters plus the class-embedding table.

    ``layers`` is a list of ``(weight, bias)`` float32 pairs with weights stored
    as ``[in, out]``. Pixels are shifted by the constant ``input_offset``
    before the first layer (``init`` centres them with 0.5). The hidden
    activation is ``relu`` for deployed models; ``softplus`` clones exist for
    smoothness analyses.
    """

    def __init__(self, arch: Architecture, layers, class_embeddings, logit_scale: float = 10.0,
                 activation: str = "relu", input_offset: float = 0.0):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if logit_scale <= 0:
            raise ValueError("logit_scale must be positive")
        self.arch = arch
        self.layers = [(np.asarray(w, dtype=np.float32), np.asarray(b, dtype=np.float32)) for w, b in layers]
        self.class_embeddings = np.asarray(class_embeddings, dtype=np.float32)
        self.logit_scale = float(np.float32(logit_scale))
        self.activation = activation
        self.input_offset = float(np.float32(input_offset))
        self._check()

    def _check(self) -> None:
        a = self.arch
        dims = a.layer_dims
        if len(self.layers) != len(dims) - 1:
            raise DimensionError(f"expected {len(dims) - 1} layers, got {len(self.layers)}")
        for (w, b), din, dout in zip(self.layers, dims[:-1], dims[1:]):
            if w.shape != (din, dout) or b.shape != (dout,):
                raise DimensionError(f"layer shapes {w.shape}/{b.shape} do not match ({din}, {dout})")
        if self.class_embeddings.shape != (a.n_classes, a.embed_dim):
            raise DimensionError(
                f"class embeddings {self.class_embeddings.shape} do not match ({a.n_classes}, {a.embed_dim})")

    @classmethod
    def init(cls, arch: Architecture, seed: int = 0, logit_scale: float = 10.0) -> "DualEncoder":
        """He-initialised encoder with random unit class rows."""
        rng = np.random.default_rng(seed)
        dims = arch.layer_dims
        layers = []
        for din, dout in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / din), size=(din, dout))
            layers.append((w, np.zeros(dout)))
        emb = rng.normal(size=(arch.n_classes, arch.embed_dim))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        return cls(arch, layers, emb, logit_scale, input_offset=0.5)

    def copy(self) -> "DualEncoder":
        return copy.deepcopy(self)

    def smooth_clone(self) -> "DualEncoder":
        """Same weights with softplus hidden units (twice differentiable)."""
        m = self.copy()
        m.activation = "softplus"
        return m

    # ------------------------------------------------------------ forward

    def _flatten(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x)
        shape = self.arch.image_shape
        if x.shape == shape or x.shape == (self.arch.n_pixels,):
            return x.reshape(1, -1), True
        if x.shape[1:] == shape or (x.ndim == 2 and x.shape[1] == self.arch.n_pixels):
            return x.reshape(x.shape[0], -1), False
        raise DimensionError(f"image shape {x.shape} does not match architecture {shape}")

    def embed(self, x) -> np.ndarray:
        """Numpy forward pass; keeps float64 inputs in float64."""
        h, single = self._flatten(x)
        dtype = np.float64 if h.dtype == np.float64 else np.float32
        h = h.astype(dtype, copy=False)
        if self.input_offset:
            h = h - dtype(self.input_offset)
        n = len(self.layers)
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.astype(dtype) + b.astype(dtype)
            if i < n - 1:
                h = _activate_np(h, self.activation, dtype)
        return h[0] if single else h

    __call__ = embed

    def encode_tensor(self, x: Tensor, params: list[Tensor] | None = None) -> Tensor:
        """Differentiable forward on a ``[B, C, W, H]`` (or single image) Tensor."""
        flat, single = self._flatten(x.data)
        h = ag.reshape(x, flat.shape)
        if self.input_offset:
            h = ag.sub(h, np.float32(self.input_offset))
        if params is None:
            params = [Tensor(p) for layer in self.layers for p in layer]
        n = len(self.layers)
        for i in range(n):
            h = ag.add(ag.matmul(h, params[2 * i]), params[2 * i + 1])
            if i < n - 1:
                h = _activate_tensor(h, self.activation)
        return ag.reshape(h, (h.shape[1],)) if single else h

    def scores_tensor(self, x: Tensor, params: list[Tensor] | None = None,
                      class_embeddings: Tensor | None = None) -> Tensor:
        emb = self.encode_tensor(x, params)
        return scores_from_embedding(emb, class_embeddings if class_embeddings is not None
                                     else Tensor(self.class_embeddings), self.logit_scale)

    def scores(self, x) -> np.ndarray:
        """Scaled cosine scores ``[B, K]`` (or ``[K]`` for one image)."""
        emb = self.embed(x)
        norm = np.linalg.norm(emb, axis=-1, keepdims=True)
        if np.any(norm <= ag.EPS_DIV):
            raise DegenerateInputError("zero-norm image embedding")
        rows = self.class_embeddings / np.linalg.norm(self.class_embeddings, axis=1, keepdims=True)
        return (self.logit_scale * (emb / norm) @ rows.T.astype(emb.dtype)).astype(emb.dtype)

    def predict_proba(self, x) -> np.ndarray:
        return ag.softmax(self.scores(x), axis=-1)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.scores(x), axis=-1)

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"layer{i}.weight"] = w
            out[f"layer{i}.bias"] = b
        out["class_embeddings"] = self.class_embeddings
        out["input_offset"] = np.asarray(self.input_offset, dtype=np.float32)
        return out


def _activate_np(h, activation, dtype):
    if activation == "relu":
        return np.maximum(h, 0)
    if activation == "clipped_relu":
        return np.clip(h, 0, CLIP_CAP).astype(dtype)
    return np.logaddexp(0, h).astype(dtype)


def _activate_tensor(h, activation):
    if activation == "relu":
        return ag.relu(h)
    if activation == "clipped_relu":
        return ag.clamp(h, 0.0, CLIP_CAP)
    return ag.softplus(h)


def scores_from_embedding(emb: Tensor, class_embeddings: Tensor, logit_scale: float) -> Tensor:
    unit_img = ag.normalize(emb, axis=-1)
    unit_cls = ag.normalize(class_embeddings, axis=-1)
    return ag.mul(ag.matmul(unit_img, ag.transpose(unit_cls)), logit_scale)


def encode_image(m: DualEncoder, x) -> Tensor:
    """Differentiable image embedding; ``x`` may be an array or a Tensor."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return m.encode_tensor(x)


def class_scores(m: DualEncoder, x) -> Tensor:
    """``logit_scale * cos(f(x), e_k)`` for every class row ``k``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return m.scores_tensor(x)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class AdversarialTraining:
    steps: int = 2
    epsilon: float = 1 / 255
    alpha: float = 1 / 255
    random_start: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("adversarial.steps must be >= 1")
        if not 0 <= self.epsilon <= 0.1:
            raise ValueError("adversarial.epsilon must lie in [0, 0.1]")
        if self.alpha <= 0:
            raise ValueError("adversarial.alpha must be positive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    adversarial: AdversarialTraining | None = None
    train_class_embeddings: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: DualEncoder
    loss_curve: list[float] = field(default_factory=list)


def _renormalize_rows(emb: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(emb, axis=1, keepdims=True)
    return (emb / np.maximum(norm, 1e-6)).astype(np.float32)


def _sgd(m: DualEncoder, images, labels, cfg: TrainConfig, update_classes: bool,
         make_inputs=None) -> TrainResult:
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise TrainingError("empty dataset")
    if np.any(labels < 0) or np.any(labels >= m.arch.n_classes):
        raise TrainingError("labels out of range")
    m = m.copy()
    rng = np.random.default_rng(cfg.seed)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = images[idx] if make_inputs is None else make_inputs(m, images[idx], labels[idx])
            params = [Tensor(p, requires_grad=True) for layer in m.layers for p in layer]
            emb = Tensor(m.class_embeddings, requires_grad=update_classes)
            try:
                with Tape() as tape:
                    loss = ag.softmax_cross_entropy(m.scores_tensor(Tensor(xb), params, emb), labels[idx])
            except DegenerateInputError as exc:
                raise TrainingError(f"degenerate forward pass at epoch {epoch}, batch starting {start}: "
                                    f"{exc}") from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            tape.backward(loss)
            lr = np.float32(cfg.learning_rate)
            m.layers = [(params[2 * i].data - lr * params[2 * i].grad,
                         params[2 * i + 1].data - lr * params[2 * i + 1].grad)
                        for i in range(len(m.layers))]
            if update_classes:
                m.class_embeddings = _renormalize_rows(emb.data - lr * emb.grad)
            if not all(np.all(np.isfinite(p)) for layer in m.layers for p in layer):
                raise TrainingError(f"non-finite parameters at epoch {epoch}, batch starting {start}")
            total += value * len(idx)
        curve.append(total / len(images))
        logger.debug("epoch %d loss %.4f", epoch, curve[-1])
    return TrainResult(m, curve)


def train_clean(m: DualEncoder, images, labels, cfg: TrainConfig) -> TrainResult:
    """Minibatch SGD on mean cross-entropy of the scaled cosine scores."""
    return _sgd(m, images, labels, cfg, update_classes=cfg.train_class_embeddings)


def finetune_tecoa(m: DualEncoder, images, labels, cfg: TrainConfig) -> TrainResult:
    """Adversarial finetuning of the image encoder; class rows stay frozen.

    Each minibatch is replaced by PGD examples crafted against the current
    weights before the gradient step.
    """
    if cfg.adversarial is None:
        raise ValueError("finetune_tecoa requires cfg.adversarial")
    from .attacks import AttackConfig, pgd_attack

    adv = cfg.adversarial
    batch_counter = [0]

    def make_inputs(current, xb, yb):
        batch_counter[0] += 1
        acfg = AttackConfig(method="pgd_ce", epsilon=adv.epsilon, alpha=adv.alpha, steps=adv.steps,
                            random_start=adv.random_start, seed=cfg.seed * 1_000_003 + batch_counter[0])
        return pgd_attack(current, xb, yb, acfg)

    return _sgd(m, images, labels, cfg, update_classes=False, make_inputs=make_inputs)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"TTCK"
VERSION = 1
_MAX_DIM = 1 << 24


class CheckpointError(ValueError):
    pass


def _checkpoint_bytes(m: DualEncoder) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<6I", *m.arch.as_tuple()),
           struct.pack("<f", m.logit_scale)]
    params = m.parameters()
    out.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(m: DualEncoder, path) -> None:
    Path(path).write_bytes(_checkpoint_bytes(m))


def load_checkpoint(path) -> DualEncoder:
    """Read a ``TTCK`` v1 file; raises :class:`CheckpointError` on any defect."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    pos = 0

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"truncated checkpoint {path}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}: {buf[:4]!r}")
    pos = 4
    (version,) = read("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch_vals = read("<6I")
    if any(v > _MAX_DIM for v in arch_vals):
        raise CheckpointError("architecture dimension overflow")
    try:
        arch = Architecture(*arch_vals)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    (scale,) = read("<f")
    (count,) = read("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = read("<H")
        if pos + nlen > len(buf):
            raise CheckpointError(f"truncated checkpoint {path}")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = read("<B")
        dims = read(f"<{rank}I")
        if any(d > _MAX_DIM for d in dims):
            raise CheckpointError(f"dimension overflow in tensor {name}")
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(buf):
            raise CheckpointError(f"truncated checkpoint {path}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes in {path}")
    n_layers = sum(1 for name in tensors if name.startswith("layer") and name.endswith(".weight"))
    if arch.hidden:
        arch = Architecture(*arch_vals, depth=max(n_layers - 1, 1))
    try:
        layers = [(tensors[f"layer{i}.weight"], tensors[f"layer{i}.bias"]) for i in range(n_layers)]
        emb = tensors["class_embeddings"]
    except KeyError as exc:
        raise CheckpointError(f"missing tensor {exc}") from None
    try:
        offset = float(tensors.get("input_offset", 0.0))
        return DualEncoder(arch, layers, emb, logit_scale=scale, input_offset=offset)
    except DimensionError as exc:
        raise CheckpointError(str(exc)) from None
