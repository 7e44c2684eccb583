"""Minimal dense numerics shared by all modules.

Matrices are plain 2-D numpy arrays (row-major). Compute defaults to float32;
float64 is used only when a caller needs sharp finite-difference gradient
checks. Cosine similarities are always clamped to [-1, 1] so that strict
comparisons downstream are never perturbed by rounding above 1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32


class DegenerateInputError(ValueError):
    """A vector or row with zero norm was passed where a direction is required."""


def matrix(data, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Validate and return a 2-D array of the requested float dtype.

    Rejects non-2-D input and any NaN/Inf entry; this is the constructor gate
    for every feature block entering the engine.
    """
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        bad = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0])
        raise ValueError(f"matrix contains non-finite entries (first bad row: {bad})")
    return arr


def row_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.square(m), axis=1))


def row_normalize(m: np.ndarray) -> np.ndarray:
    """Scale every row to unit L2 norm. Raises on zero rows, naming the index."""
    m = np.asarray(m)
    norms = row_norms(m)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateInputError(f"row {int(zero[0])} has zero norm and cannot be normalized")
    return m / norms[:, None]


def cosine_sim(a, b) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1]."""
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.sqrt(a @ a))
    nb = float(np.sqrt(b @ b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def pairwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity: entry (i, j) = cosine_sim(a[i], b[j])."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    sims = row_normalize(a) @ row_normalize(b).T
    return np.clip(sims, -1.0, 1.0)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _derive_seed(seed: int, path: str) -> int:
    h = hashlib.blake2s(digest_size=8)
    h.update(repr(int(seed)).encode("ascii"))
    h.update(path.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Named deterministic RNG stream.

    The same (seed, stream_id) pair always yields the same generator, and
    child streams derive their state from the full path, so independent
    consumers (pool sampling, per-anchor negatives, ...) stay reproducible
    regardless of scheduling order.
    """

    seed: int
    stream_id: str = "root"

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.stream_id}/{label}")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(_derive_seed(self.seed, self.stream_id)))
