"""Datasets: seeded synthetic class blobs and the IDX image/label format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


class IDXMagicError(IDXFormatError):
    pass


class IDXTruncatedError(IDXFormatError):
    pass


class IDXCountMismatchError(IDXFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError("images must be [N, C, W, H]")
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise ValueError("dataset needs N >= 1 images with one label each")
        if not self.class_names:
            self.class_names = [str(k) for k in range(int(self.labels.max()) + 1)]
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise ValueError("labels out of range")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names), split or self.split)


def _smooth_pattern(rng, C, W, H, coarse: int) -> np.ndarray:
    grid = rng.normal(size=(C, coarse, coarse))
    # bilinear upsampling of a coarse grid keeps class patterns spatially smooth
    xs = np.linspace(0, coarse - 1, W)
    ys = np.linspace(0, coarse - 1, H)
    x0 = np.floor(xs).astype(int).clip(0, coarse - 2)
    y0 = np.floor(ys).astype(int).clip(0, coarse - 2)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[None, :]
    out = np.empty((C, W, H))
    for c in range(C):
        g = grid[c]
        a = g[np.ix_(x0, y0)]
        b = g[np.ix_(x0 + 1, y0)]
        cc = g[np.ix_(x0, y0 + 1)]
        d = g[np.ix_(x0 + 1, y0 + 1)]
        out[c] = a * (1 - fx) * (1 - fy) + b * fx * (1 - fy) + cc * (1 - fx) * fy + d * fx * fy
    return out


def generate_synthetic(K: int = 10, per_class: int = 100, C: int = 3, W: int = 16, H: int = 16,
                       separation: float = 2.0, seed: int = 0, noise: float = 0.1, coarse: int = 4,
                       split: str = "train") -> Dataset:
    """Gaussian class blobs around smooth random class means.

    Class means are ``0.5 + (separation / sqrt(2)) * u_k`` for random unit-norm
    smooth patterns ``u_k``, so distinct means sit roughly ``separation`` apart
    in L2. Pixels get iid ``N(0, noise^2)`` and are clamped to ``[0, 1]``.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if min(per_class, C, W, H) < 1 or coarse < 2:
        raise ValueError("invalid dimensions")
    if separation < 0 or noise < 0:
        raise ValueError("separation and noise must be nonnegative")
    rng = np.random.default_rng(seed)
    means = []
    for _ in range(K):
        u = _smooth_pattern(rng, C, W, H, coarse)
        u -= u.mean()
        means.append(0.5 + separation / np.sqrt(2) * u / np.linalg.norm(u))
    images = np.empty((K * per_class, C, W, H), dtype=np.float32)
    labels = np.repeat(np.arange(K), per_class)
    for k in range(K):
        block = means[k] + noise * rng.normal(size=(per_class, C, W, H))
        images[k * per_class:(k + 1) * per_class] = np.clip(block, 0, 1)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], [f"class_{k}" for k in range(K)], split)


def train_test_split(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = max(1, int(round(test_fraction * len(ds))))
    return ds.subset(order[n_test:], "train"), ds.subset(order[:n_test], "test")


# ---------------------------------------------------------------- IDX


def _read_idx(path: Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise IDXTruncatedError(f"{path}: file shorter than the IDX header")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise IDXMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IDXTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    n = int(np.prod(dims))
    if len(buf) < header + n:
        raise IDXTruncatedError(f"{path}: expected {n} data bytes, found {len(buf) - header}")
    return dims, buf[header:header + n]


def load_idx(images_path, labels_path, split: str = "train", n_classes: int | None = None) -> Dataset:
    """Load an IDX ubyte image/label pair; pixels are scaled by 1/255.

    Images are ``[N, W, H]`` (one channel) and come back as ``[N, 1, W, H]``.
    """
    idims, ibytes = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (n_labels,), lbytes = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if idims[0] != n_labels:
        raise IDXCountMismatchError(f"{idims[0]} images but {n_labels} labels")
    pixels = np.frombuffer(ibytes, dtype=np.uint8).reshape(idims[0], 1, idims[1], idims[2])
    labels = np.frombuffer(lbytes, dtype=np.uint8).astype(np.int64)
    K = n_classes or int(labels.max()) + 1
    return Dataset(pixels.astype(np.float32) / np.float32(255), labels, [str(k) for k in range(K)], split)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels_u8: np.ndarray) -> None:
    """Write ``[N, W, H]`` uint8 images and ``[N]`` uint8 labels in IDX format."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">I", IDX_IMAGES_MAGIC)
                                  + struct.pack(">3I", *images_u8.shape) + images_u8.tobytes())
    Path(labels_path).write_bytes(struct.pack(">I", IDX_LABELS_MAGIC)
                                  + struct.pack(">I", len(labels_u8)) + labels_u8.tobytes())
