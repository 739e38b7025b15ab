"""Deterministic numeric kernel shared by every other module.

Vectors are 1-D float64 numpy arrays, matrices are 2-D. All similarity
helpers work on raw (unnormalized) inputs; batched code paths that scan a
queue every iteration should normalize once and use the ``*_normalized``
variants instead.
"""

from __future__ import annotations

import numpy as np


class ZeroNormError(ValueError):
    """Raised when an operation needs a nonzero vector and got a zero one."""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


def as_vector(v) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"expected a nonempty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains non-finite entries")
    return arr


def as_matrix(m) -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains non-finite entries")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    Raises :class:`ZeroNormError` on a zero vector instead of returning NaN.
    """
    arr = as_vector(v)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ZeroNormError("cannot normalize a zero vector")
    return arr / norm


def l2_normalize_rows(m) -> np.ndarray:
    """Row-wise unit normalization of a matrix; zero rows raise."""
    arr = as_matrix(m)
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms == 0.0):
        raise ZeroNormError("matrix has a zero row")
    return arr / norms[:, None]


def cosine_sim(u, v) -> float:
    """Cosine similarity, clipped into [-1, 1] against rounding spill."""
    a = as_vector(u)
    b = as_vector(v)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def sim_exp(u, v, tau: float) -> float:
    """Temperature-scaled exponential similarity exp(cos(u, v) / tau)."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return float(np.exp(cosine_sim(u, v) / tau))


def topk_desc(scores, k: int, exclude: int | None = None) -> np.ndarray:
    """Indices of the ``k`` largest scores, descending, ties to lower index.

    ``exclude`` removes one index from consideration before ranking (used to
    drop the anchor itself from its own neighbor list).
    """
    arr = as_vector(scores)
    n = arr.size
    usable = n - (1 if exclude is not None and 0 <= exclude < n else 0)
    if k < 1 or k > usable:
        raise ValueError(f"k={k} out of range for {usable} usable scores")
    idx = np.arange(n)
    if exclude is not None and 0 <= exclude < n:
        keep = idx != exclude
        idx = idx[keep]
        arr = arr[keep]
    # lexsort's last key dominates: sort by descending score, then ascending index
    order = np.lexsort((idx, -arr))
    return idx[order[:k]].copy()


def softmax(v, tau: float = 1.0) -> np.ndarray:
    """Stable softmax of ``v / tau`` (max-subtraction before exponentiation)."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    arr = as_vector(v) / tau
    arr = arr - arr.max()
    e = np.exp(arr)
    return e / e.sum()


def softmax_rows(m: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Row-wise stable softmax for 2-D logits."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    arr = np.asarray(m, dtype=np.float64) / tau
    arr = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(arr)
    return e / e.sum(axis=-1, keepdims=True)


def pairwise_cosine_normalized(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine matrix for rows that are already unit-norm: plain dot products."""
    return np.clip(a @ b.T, -1.0, 1.0)


def make_rng(seed, *stream) -> np.random.Generator:
    """Seeded generator for an explicitly named stream.

    Identical (seed, stream) pairs always produce identical draw sequences;
    distinct streams are statistically independent.
    """
    return np.random.default_rng([int(seed)] + [int(s) for s in stream])
