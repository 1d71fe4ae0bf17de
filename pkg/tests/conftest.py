"""Shared fixtures and the independent per-byte scoring oracle."""

import math
from pathlib import Path

import numpy as np
import pytest

from bytelm import ModelConfig
from bytelm.evaluation import LEAD_BYTE
from bytelm.model import ByteTransformer

FIXTURES = Path(__file__).parent / "fixtures"

TINY = ModelConfig(
    num_layers=2,
    hidden_size=16,
    filter_size=32,
    num_heads=2,
    embed_dim=8,
    context_len=32,
    dropout_rate=0.3,
)

# Same sizes but dropout-free, for optimization tests.
TINY_PLAIN = ModelConfig(
    num_layers=2,
    hidden_size=16,
    filter_size=32,
    num_heads=2,
    embed_dim=8,
    context_len=32,
    dropout_rate=0.0,
)


@pytest.fixture(scope="session")
def tiny_model():
    return ByteTransformer(TINY, seed=7)


@pytest.fixture(scope="session")
def zero_head_model():
    import torch

    model = ByteTransformer(TINY, seed=7)
    with torch.no_grad():
        model.output_head.zero_()
        model.output_head_bias.zero_()
    return model


def random_text(n: int, seed: int) -> bytes:
    """Printable pseudo-random bytes with newlines sprinkled in."""
    rng = np.random.default_rng(seed)
    data = rng.integers(32, 127, size=n, dtype=np.uint8)
    data[rng.random(n) < 0.03] = 0x0A
    return bytes(data)


def naive_oracle_total_bits(model, data: bytes, c: int, s: int) -> float:
    """Re-score every byte from scratch with its defined context.

    Walks the window geometry independently of the production scorer: the
    first window scores all its stream positions, later windows their last s,
    a ragged tail is right-aligned, and a window's own first position (the
    stride == context case) falls back to the maximal c-1 preceding bytes.
    Each byte is scored by a fresh forward pass over just its context.
    """
    z = bytes([LEAD_BYTE]) + data
    n = len(data)
    spans = []
    first_end = min(c, n + 1)
    spans.append((0, 1, first_end))
    covered = first_end
    k = 1
    while k * s + c <= n + 1:
        spans.append((k * s, k * s + c - s, k * s + c))
        covered = k * s + c
        k += 1
    if covered < n + 1:
        spans.append((n + 1 - c, covered, n + 1))

    total = 0.0
    for offset, lo, hi in spans:
        for j in range(lo, hi):
            start = j - (c - 1) if j == offset else offset
            probs = model.predict_distribution(z[start:j])
            total += -math.log2(probs[z[j]])
    return total


def pytest_addoption(parser):
    parser.addoption(
        "--lm1b-test-shard",
        default=None,
        help="path to the real lm1b holdout shard 00 to check published counts",
    )


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion.
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    print(f"\n[acceptance] {name}: {'PASS' if report.passed else 'FAIL'}", flush=True)
