"""Shared fixtures: small models, seeded token streams, synthetic traces."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from corm.attention import softmax_normalize
from corm.model import ModelConfig, init_model
from corm.trace import AttentionTrace, TraceMeta

settings.register_profile(
    "ci", derandomize=True, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ci")


def seeded_tokens(seed: int, length: int, vocab: int = 256) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.integers(0, vocab, size=length, dtype=np.int64)


def make_synthetic_trace(
    n_layers: int = 1,
    n_heads: int = 1,
    n_steps: int = 32,
    seed: int = 0,
    d_h: int = 4,
    sharpness: float = 4.0,
) -> AttentionTrace:
    """Random full-cache trace; higher sharpness means peakier rows."""
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    queries = []
    for t in range(1, n_steps + 1):
        logits = rng.normal(size=(n_layers, n_heads, t)) * sharpness
        block = np.empty_like(logits)
        for li in range(n_layers):
            for hd in range(n_heads):
                block[li, hd] = softmax_normalize(logits[li, hd])
        rows.append(block.astype(np.float32))
        queries.append(rng.normal(size=(n_layers, n_heads, d_h)).astype(np.float32))
    meta = TraceMeta(
        n_layers=n_layers,
        n_heads=n_heads,
        n_kv_heads=n_heads,
        d_model=d_h * n_heads,
        d_h=d_h,
        vocab_size=256,
        pe_kind="rope",
        rope_base=10000.0,
        seed=seed,
    )
    tokens = seeded_tokens(seed, n_steps)
    return AttentionTrace(meta=meta, tokens=tokens, rows=rows, queries=queries)


@pytest.fixture(scope="session")
def small_model():
    """2-layer / 4-head RoPE model shared by read-only tests."""
    return init_model(ModelConfig(n_layers=2, n_heads=4, d_model=64, vocab_size=256, seed=42))


@pytest.fixture(scope="session")
def small_trace(small_model):
    """64-step recorded trace of the shared model."""
    from corm.trace import record

    return record(small_model, seeded_tokens(5, 64))
