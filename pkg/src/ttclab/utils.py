"""Seed splitting and input validation shared by attacks, defenses and analyses."""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one sample; results do not depend on batching."""
    return np.random.default_rng(np.random.SeedSequence([seed & _MASK64, int(index), int(stream)]))


def uniform_noise(seed: int, indices, shape, epsilon: float, stream: int = 0) -> np.ndarray:
    """``U(-epsilon, epsilon)`` noise of ``shape`` per sample index, float32."""
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    out = np.empty((len(indices),) + tuple(shape), dtype=np.float32)
    for row, idx in enumerate(indices):
        draw = sample_rng(seed, idx, stream).uniform(-1.0, 1.0, size=shape)
        out[row] = (np.float32(epsilon) * draw.astype(np.float32))
    return out


def check_images(x, image_shape, allow_single: bool = True) -> tuple[np.ndarray, bool]:
    """Return ``x`` as a float32 ``[B, *image_shape]`` batch and whether it was a single image.

    Accepts flattened images too. Pixel values must lie in ``[0, 1]``.
    """
    x = np.asarray(x, dtype=np.float32)
    n_pix = int(np.prod(image_shape))
    if allow_single and (x.shape == tuple(image_shape) or x.shape == (n_pix,)):
        batch, single = x.reshape((1,) + tuple(image_shape)), True
    elif x.ndim >= 2 and int(np.prod(x.shape[1:])) == n_pix:
        batch, single = x.reshape((x.shape[0],) + tuple(image_shape)), False
    else:
        raise ValueError(f"images of shape {x.shape} do not match image shape {tuple(image_shape)}")
    if not np.all(np.isfinite(batch)):
        raise ValueError("images contain non-finite values")
    if batch.size and (batch.min() < 0.0 or batch.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return batch, single


def check_labels(y, n: int, n_classes: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise IndexError(f"label out of range [0, {n_classes})")
    return y


def sample_indices(n: int, indices=None) -> np.ndarray:
    if indices is None:
        return np.arange(n, dtype=np.int64)
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    if indices.shape != (n,):
        raise ValueError(f"expected {n} sample indices, got shape {indices.shape}")
    return indices
