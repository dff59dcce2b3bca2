"""Complex/real tensor primitives, NMSE and seeded random sampling.

Complex matrices are plain ``complex128`` arrays of shape ``(rows, cols)``;
stacked tensors are ``float64`` arrays of shape ``(2, rows, cols)`` holding
the real plane followed by the imaginary plane.  Leading batch axes are
allowed everywhere.
"""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

QPSK = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2.0)

# Named streams used across the package.  Keeping them here avoids aliasing.
STREAMS = (
    "dataset",
    "pilots",
    "noise",
    "training-batch",
    "estimator-init",
    "estimator-renoise",
)


class StructureError(ValueError):
    """Array does not have the shape an operation requires."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


def _stream_word(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError("stream keys must be non-negative")
    return int(key)


class Rng:
    """Deterministic counter-based generator with forkable named streams.

    Each stream is a Philox generator keyed by ``(seed, path)``, where
    ``path`` is the sequence of fork keys that led to it.  Forking never
    consumes draws from the parent, so children are independent of how much
    the parent has been used.
    """

    def __init__(self, seed: int = 0, path: Sequence[int | str] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(path)
        words = tuple(_stream_word(k) for k in self.path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=words)
        self.gen = np.random.Generator(np.random.Philox(ss))

    @property
    def stream_id(self) -> int:
        """64-bit identifier of this stream (0 for the root)."""
        if not self.path:
            return 0
        h = 0
        for k in self.path:
            h = (h * 0x100000001B3 ^ _stream_word(k)) & 0xFFFFFFFFFFFFFFFF
        return h

    def fork(self, *keys: int | str) -> "Rng":
        """Child stream addressed by ``keys`` (names or integer indices)."""
        return Rng(self.seed, self.path + tuple(keys))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"

    def normal(self, shape) -> np.ndarray:
        return self.gen.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self.gen.random(shape)

    def integers(self, high: int, shape) -> np.ndarray:
        return self.gen.integers(0, high, size=shape)


def stack(h: np.ndarray) -> np.ndarray:
    """Map a complex ``(..., r, c)`` matrix to its real ``(..., 2, r, c)`` stack."""
    h = np.asarray(h)
    if h.ndim < 2:
        raise StructureError(f"expected a matrix, got shape {h.shape}")
    return np.stack([h.real, h.imag], axis=-3).astype(np.float64, copy=False)


def unstack(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`stack`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3 or x.shape[-3] != 2:
        raise StructureError(f"expected 2 channels on axis -3, got shape {x.shape}")
    out = np.empty(x.shape[:-3] + x.shape[-2:], dtype=np.complex128)
    out.real = x[..., 0, :, :]
    out.imag = x[..., 1, :, :]
    return out


def frob2(h: np.ndarray) -> float:
    """Squared Frobenius norm (sum of squared moduli)."""
    h = np.asarray(h)
    if np.iscomplexobj(h):
        return float(np.sum(h.real**2) + np.sum(h.imag**2))
    return float(np.sum(h * h))


def nmse_db(h_hat: np.ndarray, h: np.ndarray) -> float:
    """``10 log10(||h_hat - h||^2 / ||h||^2)``; ``-inf`` for an exact estimate."""
    h_hat = np.asarray(h_hat)
    h = np.asarray(h)
    if h_hat.shape != h.shape:
        raise StructureError(f"shape mismatch {h_hat.shape} vs {h.shape}")
    den = frob2(h)
    if den == 0.0:
        raise DomainError("reference channel has zero norm")
    num = frob2(h_hat - h)
    if num == 0.0:
        return float("-inf")
    return 10.0 * np.log10(num / den)


def draw_gaussian_tensor(rng: Rng, shape) -> np.ndarray:
    """Real tensor with i.i.d. N(0, 1) entries."""
    return rng.normal(shape)


def draw_complex_gaussian_matrix(rng: Rng, rows: int, cols: int,
                                 per_entry_variance: float = 1.0) -> np.ndarray:
    """Matrix with i.i.d. CN(0, per_entry_variance) entries."""
    if not per_entry_variance > 0:
        raise DomainError("per-entry variance must be positive")
    parts = rng.normal((2, rows, cols)) * np.sqrt(per_entry_variance / 2.0)
    return unstack(parts)


def draw_qpsk_pilots(rng: Rng, n_t: int, n_p: int) -> np.ndarray:
    """``n_t x n_p`` matrix of i.i.d. uniform unit-power QPSK symbols."""
    if n_t < 1 or n_p < 1:
        raise DomainError("pilot dimensions must be positive")
    return QPSK[rng.integers(4, (n_t, n_p))]
