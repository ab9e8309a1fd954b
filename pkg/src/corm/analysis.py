"""Sparsity, query-similarity, overlap, and divergence measurements.

Everything here is a pure function over an immutable trace or over run
outputs. CSV emitters live at the bottom; each writer's docstring is the
schema contract. Floats are formatted with repr() so files are byte-stable
across runs and platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ToyTransformer
from .policies import PolicyConfig, mean_compression_rate
from .trace import AttentionTrace

__all__ = [
    "SparsityProfile",
    "sparsity_profile",
    "sparsity_from_steps",
    "query_similarity_map",
    "recent_similarity_fraction",
    "importance_overlap",
    "overlap_similarity_samples",
    "spearman_rank_correlation",
    "Divergence",
    "output_divergence",
    "compression_curve",
    "aggregate_curves",
    "write_sparsity_csv",
    "write_similarity_csv",
    "write_recent_fraction_csv",
    "write_overlap_csv",
    "write_curve_csv",
    "write_divergence_csv",
    "write_json",
]


# --------------------------------------------------------------------------
# Sparsity
# --------------------------------------------------------------------------


@dataclass
class SparsityProfile:
    """Mean fraction of keys scoring at least 1/t, per head and per layer.

    A smaller important-key fraction means a sparser head; `sparsity` is the
    complementary fraction. Values are means over steps; aggregate over texts
    by averaging profiles.
    """

    per_head: np.ndarray  # (n_layers, n_heads)
    per_layer: np.ndarray  # (n_layers,), mean over heads

    @property
    def sparsity_per_head(self) -> np.ndarray:
        return 1.0 - self.per_head

    @property
    def sparsity_per_layer(self) -> np.ndarray:
        return 1.0 - self.per_layer


def sparsity_from_steps(steps: Sequence[np.ndarray]) -> SparsityProfile:
    """Profile from per-step (n_layers, n_heads, t) row arrays, t = 1.. in order."""
    if not steps:
        raise ValueError("no steps to profile")
    acc = np.zeros(steps[0].shape[:2], dtype=np.float64)
    for t, block in enumerate(steps, start=1):
        mask = block.astype(np.float64) >= 1.0 / t
        acc += mask.mean(axis=2)
    per_head = acc / len(steps)
    return SparsityProfile(per_head=per_head, per_layer=per_head.mean(axis=1))


def sparsity_profile(trace: AttentionTrace) -> SparsityProfile:
    """Important-key fraction profile of a recorded trace."""
    return sparsity_from_steps(trace.rows)


# --------------------------------------------------------------------------
# Query similarity
# --------------------------------------------------------------------------


def query_similarity_map(trace: AttentionTrace, layer: int, head: int, max_steps: int | None = None) -> np.ndarray:
    """Strictly lower-triangular cosine map of one head's query vectors.

    Entry (i, j) for j < i (0-based) is the cosine similarity between the
    queries of steps i+1 and j+1; the diagonal and upper triangle are zero.
    """
    t_max = trace.n_steps if max_steps is None else min(max_steps, trace.n_steps)
    q = np.stack([trace.queries[t][layer, head] for t in range(t_max)]).astype(np.float64)
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero query vector: cosine similarity undefined")
    qn = q / norms[:, None]
    return np.tril(qn @ qn.T, k=-1)


def recent_similarity_fraction(sim_map: np.ndarray, k: int) -> float:
    """Fraction of queries whose most similar predecessor is at most k steps back.

    Rows with no predecessor (the first query) are excluded. Argmax ties go to
    the earlier predecessor.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = sim_map.shape[0]
    if n < 2:
        raise ValueError("similarity map needs at least 2 queries")
    hits = 0
    for i in range(1, n):
        j = int(np.argmax(sim_map[i, :i]))
        if i - j <= k:
            hits += 1
    return hits / (n - 1)


def importance_overlap(trace: AttentionTrace, layer: int, head: int, i: int, j: int) -> float:
    """Jaccard overlap of the important-key masks of queries i and j (1-based).

    Masks are thresholded at 1/i and 1/j respectively and compared over the
    common prefix of min(i, j) - 1 keys. Two empty masks count as full overlap.
    """
    t_max = trace.n_steps
    if not (1 <= i <= t_max and 1 <= j <= t_max):
        raise ValueError(f"steps ({i}, {j}) outside trace of {t_max} steps")
    m = min(i, j) - 1
    if m == 0:
        return 1.0
    mask_i = trace.rows[i - 1][layer, head].astype(np.float64)[:m] >= 1.0 / i
    mask_j = trace.rows[j - 1][layer, head].astype(np.float64)[:m] >= 1.0 / j
    union = int(np.sum(mask_i | mask_j))
    if union == 0:
        return 1.0
    return float(np.sum(mask_i & mask_j)) / union


def overlap_similarity_samples(
    trace: AttentionTrace, layer: int, head: int, n_pairs: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Sampled (query cosine, mask Jaccard) pairs for one head.

    Draws n_pairs random step pairs 2 <= j < i <= T and returns the two
    aligned arrays, ready for rank correlation.
    """
    t_max = trace.n_steps
    if t_max < 3:
        raise ValueError("need at least 3 steps to sample pairs")
    rng = np.random.Generator(np.random.PCG64(seed))
    cos = np.empty(n_pairs)
    jac = np.empty(n_pairs)
    for n in range(n_pairs):
        i = int(rng.integers(3, t_max + 1))
        j = int(rng.integers(2, i))
        qi = trace.queries[i - 1][layer, head].astype(np.float64)
        qj = trace.queries[j - 1][layer, head].astype(np.float64)
        cos[n] = qi @ qj / (np.linalg.norm(qi) * np.linalg.norm(qj))
        jac[n] = importance_overlap(trace, layer, head, i, j)
    return cos, jac


def _ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank for ties
        i = j + 1
    return ranks


def spearman_rank_correlation(x, y) -> float:
    """Spearman's rho with average ranks for ties; nan if either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length 1-D samples of size >= 2")
    rx, ry = _ranks(x), _ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return float("nan")
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))


# --------------------------------------------------------------------------
# Output divergence and compression curves
# --------------------------------------------------------------------------


@dataclass
class Divergence:
    """Per-step comparison of two logit sequences over the same inputs."""

    top1_match: np.ndarray  # (T,) bool
    kl: np.ndarray  # (T,) float64, KL(reference || other)

    @property
    def top1_agreement(self) -> float:
        return float(self.top1_match.mean())

    @property
    def mean_kl(self) -> float:
        return float(self.kl.mean())


def output_divergence(logits_ref: np.ndarray, logits_other: np.ndarray) -> Divergence:
    """Top-1 agreement and mean KL(reference || other) of per-step logits."""
    a = np.asarray(logits_ref, dtype=np.float64)
    b = np.asarray(logits_other, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"logit shapes differ: {a.shape} vs {b.shape}")
    match = np.argmax(a, axis=1) == np.argmax(b, axis=1)
    la = a - a.max(axis=1, keepdims=True)
    lb = b - b.max(axis=1, keepdims=True)
    logp = la - np.log(np.exp(la).sum(axis=1, keepdims=True))
    logq = lb - np.log(np.exp(lb).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    kl = np.sum(p * (logp - logq), axis=1)
    return Divergence(top1_match=match, kl=np.maximum(kl, 0.0))


def compression_curve(
    model: ToyTransformer,
    tokens: Sequence[int],
    policy: PolicyConfig,
    checkpoints: Sequence[int],
) -> list[tuple[int, float]]:
    """Live model-mean compression rate at each checkpoint step.

    Checkpoints must be sorted ascending; those beyond the sequence length
    are skipped.
    """
    cps = list(checkpoints)
    if cps != sorted(cps) or len(set(cps)) != len(cps):
        raise ValueError("checkpoints must be strictly ascending")
    if any(c < 1 for c in cps):
        raise ValueError("checkpoints must be >= 1")
    want = set(cps)
    out: list[tuple[int, float]] = []

    def on_step(t, state):
        if t in want:
            out.append((t, mean_compression_rate(state.caches, t)))

    model.run(tokens, policy, on_step=on_step)
    return out


def aggregate_curves(curves: Sequence[Sequence[tuple[int, float]]]) -> list[tuple[int, float]]:
    """Mean rate per checkpoint across several texts' curves (same checkpoints)."""
    if not curves:
        raise ValueError("no curves to aggregate")
    steps = [tuple(t for t, _ in c) for c in curves]
    if len(set(steps)) != 1:
        raise ValueError("curves cover different checkpoints")
    rates = np.array([[r for _, r in c] for c in curves])
    return [(t, float(m)) for t, m in zip(steps[0], rates.mean(axis=0))]


# --------------------------------------------------------------------------
# File emitters
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_sparsity_csv(path, profile: SparsityProfile) -> None:
    """Columns: layer, head, important_fraction, sparsity. One row per head."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer,head,important_fraction,sparsity\n")
        n_layers, n_heads = profile.per_head.shape
        for li in range(n_layers):
            for hd in range(n_heads):
                f = profile.per_head[li, hd]
                fh.write(f"{li},{hd},{_fmt(f)},{_fmt(1.0 - f)}\n")


def write_similarity_csv(path, sim_map: np.ndarray) -> None:
    """Dense lower-triangular grid; row i holds similarities to queries 0..i-1.

    Comma-separated floats, one map row per line, upper triangle written as
    empty cells.
    """
    with open(path, "w", encoding="utf-8") as fh:
        n = sim_map.shape[0]
        for i in range(n):
            cells = [_fmt(sim_map[i, j]) if j < i else "" for j in range(n)]
            fh.write(",".join(cells) + "\n")


def write_recent_fraction_csv(path, rows: Sequence[tuple[int, int, int, float]]) -> None:
    """Columns: layer, head, k, recent_fraction."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer,head,k,recent_fraction\n")
        for li, hd, k, frac in rows:
            fh.write(f"{li},{hd},{k},{_fmt(frac)}\n")


def write_overlap_csv(path, rows: Sequence[tuple[int, int, float, float]]) -> None:
    """Columns: layer, head, query_cosine, jaccard. One row per sampled pair."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer,head,query_cosine,jaccard\n")
        for li, hd, cos, jac in rows:
            fh.write(f"{li},{hd},{_fmt(cos)},{_fmt(jac)}\n")


def write_curve_csv(path, curve: Sequence[tuple[int, float]]) -> None:
    """Columns: step, compression_rate."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,compression_rate\n")
        for t, rate in curve:
            fh.write(f"{t},{_fmt(rate)}\n")


def write_divergence_csv(path, div: Divergence) -> None:
    """Columns: step, top1_match (0/1), kl. One row per teacher-forced step."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,top1_match,kl\n")
        for t, (m, kl) in enumerate(zip(div.top1_match, div.kl), start=1):
            fh.write(f"{t},{int(m)},{_fmt(kl)}\n")


def write_json(path, payload: dict) -> None:
    """Canonical JSON: sorted keys, fixed separators, trailing newline."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
