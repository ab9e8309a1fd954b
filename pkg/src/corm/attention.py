"""Pure attention math shared by the model, the eviction policies, and analysis.

All score arithmetic is done in float64 regardless of how model weights are
stored: eviction decisions compare normalized scores against a 1/t threshold,
which is sensitive near equality, so this module never drops to float32.
Every function here is stateless and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AttentionRow",
    "scaled_dot_scores",
    "softmax_normalize",
    "cosine_similarity",
    "attention_output",
    "stable_argsort_desc",
]

SUM_TOL = 1e-6


@dataclass
class AttentionRow:
    """One query's normalized attention scores over the current cache.

    `scores[i]` is the softmax weight the step-`step` query put on the i-th
    surviving cache entry. Scores are validated on construction: finite,
    within [0, 1], and summing to 1 within 1e-6.
    """

    step: int
    scores: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.step < 1:
            raise ValueError(f"step must be >= 1, got {self.step}")
        if self.scores.ndim != 1 or self.scores.size == 0:
            raise ValueError("scores must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores contain NaN or Inf")
        if self.scores.min() < -1e-12 or self.scores.max() > 1.0 + 1e-12:
            raise ValueError("scores must lie in [0, 1]")
        total = float(self.scores.sum())
        if abs(total - 1.0) > SUM_TOL:
            raise ValueError(f"scores sum to {total}, expected 1 within {SUM_TOL}")

    def __len__(self) -> int:
        return self.scores.size


def _as_key_matrix(keys, d_h: int) -> np.ndarray:
    if isinstance(keys, np.ndarray) and keys.ndim == 2:
        if keys.shape[1] != d_h:
            raise ValueError(f"keys have length {keys.shape[1]}, expected d_h={d_h}")
        return keys.astype(np.float64, copy=False)
    rows = [np.asarray(k, dtype=np.float64) for k in keys]
    for i, k in enumerate(rows):
        if k.ndim != 1 or k.shape[0] != d_h:
            got = k.shape[0] if k.ndim == 1 else f"shape {k.shape}"
            raise ValueError(f"key {i} has length {got}, expected d_h={d_h}")
    if not rows:
        return np.zeros((0, d_h), dtype=np.float64)
    return np.stack(rows)


def scaled_dot_scores(q, keys, d_h: int) -> np.ndarray:
    """Unnormalized attention weights q.k_i / sqrt(d_h) for each key, in order.

    The 1/sqrt(d_h) factor rescales but never reorders the weights, and the
    same holds for any positive rescaling of the query: argsort is invariant
    under q -> m*q for m > 0.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != d_h:
        got = q.shape[0] if q.ndim == 1 else f"shape {q.shape}"
        raise ValueError(f"query has length {got}, expected d_h={d_h}")
    kmat = _as_key_matrix(keys, d_h)
    return kmat @ q / math.sqrt(d_h)


def softmax_normalize(weights) -> np.ndarray:
    """Softmax with max-subtraction; entries positive, summing to 1.

    Order is preserved exactly (exp is monotone), so the argsort of the output
    equals the argsort of the input.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("softmax input must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(w)):
        raise ValueError("softmax input contains NaN or Inf")
    e = np.exp(w - w.max())
    return e / e.sum()


def cosine_similarity(a, b) -> float:
    """a.b / (|a| |b|), in [-1, 1]. Raises on zero vectors (undefined)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"vectors must share one dimension, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def attention_output(scores, values) -> np.ndarray:
    """Weighted sum of value vectors: sum_i scores[i] * values[i]."""
    if isinstance(scores, AttentionRow):
        scores = scores.scores
    s = np.asarray(scores, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    if s.shape[0] != v.shape[0]:
        raise ValueError(f"{s.shape[0]} scores for {v.shape[0]} values")
    return s @ v


def stable_argsort_desc(scores) -> np.ndarray:
    """Indices sorting scores descending; ties broken by lower index first."""
    s = np.asarray(scores, dtype=np.float64)
    return np.argsort(-s, kind="stable")
