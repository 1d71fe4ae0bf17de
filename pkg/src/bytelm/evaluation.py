"""Windowed strided scoring and the segmentation-free metric conversions.

Scoring covers every corpus byte exactly once. A stream is scored as one lead
newline byte followed by the corpus, so the first byte has a defined context.
Windows of ``context_len`` bytes start at offsets 0, stride, 2*stride, ...
over that stream; the first window scores everything it covers, each later
window its last ``stride`` positions, and a ragged tail is right-aligned so
no byte is skipped or scored twice. With stride 1 every byte after the warmup
is conditioned on the full (context_len - 1)-byte context.

When stride equals context_len, each window's own first position has no
in-window context; that byte is scored against the maximal (context_len - 1)
preceding stream bytes instead.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import torch

from .model import ByteTransformer

LN2 = math.log(2.0)
LEAD_BYTE = 0x0A
SUMMATION_ORDER = "window-sequential-kahan"


@dataclass(frozen=True)
class ScoreReport:
    """Corpus-level scoring result; bpb = total_bits / scored_bytes."""

    total_bits: float
    scored_bytes: int
    stride: int
    context_len: int
    bpb: float
    word_count: int | None = None
    perplexity: float | None = None
    summation_order: str = SUMMATION_ORDER

    def with_word_count(self, word_count: int) -> "ScoreReport":
        """Attach word accounting and the implied word perplexity."""
        return replace(
            self,
            word_count=word_count,
            perplexity=bpb_to_ppl(self.bpb, self.scored_bytes, word_count),
        )

    def format_line(self) -> str:
        ppl = "-" if self.perplexity is None else f"{self.perplexity:.6f}"
        words = "-" if self.word_count is None else str(self.word_count)
        return (
            f"bpb={self.bpb:.6f} ppl={ppl} bytes={self.scored_bytes} "
            f"words={words} stride={self.stride} context={self.context_len}"
        )

    def to_record(self) -> str:
        return json.dumps(
            {
                "bpb": self.bpb,
                "ppl": self.perplexity,
                "bytes": self.scored_bytes,
                "words": self.word_count,
                "stride": self.stride,
                "context": self.context_len,
                "total_bits": self.total_bits,
                "summation_order": self.summation_order,
            }
        )


def bpb_to_ppl(bpb: float, byte_count: int, word_count: int) -> float:
    """Word perplexity implied by a byte-level score: 2^((bytes/words) * bpb)."""
    if word_count < 1:
        raise ValueError(f"word_count must be >= 1, got {word_count}")
    if bpb < 0:
        raise ValueError(f"bpb must be >= 0, got {bpb}")
    return 2.0 ** ((byte_count / word_count) * bpb)


def bits_per_word_to_bpb(bits_per_word: float, byte_count: int, word_count: int) -> float:
    """Re-denominate information: bits/word * words = bits/byte * bytes."""
    if byte_count < 1:
        raise ValueError(f"byte_count must be >= 1, got {byte_count}")
    return bits_per_word * word_count / byte_count


def _plan_windows(n: int, c: int, s: int):
    """Yield (offset, end, scored_start, scored_end) in lead-byte-stream
    coordinates; positions 1..n are the corpus bytes."""
    total = n + 1
    first_end = min(c, total)
    yield 0, first_end, 1, first_end
    covered = first_end
    if covered >= total:
        return
    k = 1
    while k * s + c <= total:
        offset = k * s
        yield offset, offset + c, offset + c - s, offset + c
        covered = offset + c
        k += 1
    if covered < total:
        yield total - c, total, covered, total


def _kahan_sum(values) -> float:
    total = 0.0
    carry = 0.0
    for value in values:
        y = value - carry
        t = total + y
        carry = (t - total) - y
        total = t
    return total


def windowed_score(
    model: ByteTransformer,
    corpus_bytes: bytes,
    context_len: int,
    stride: int,
    *,
    batch_size: int = 128,
    threads: int = 1,
    return_per_byte: bool = False,
):
    """Score a corpus with strided windows; every byte is scored exactly once.

    Windows are batched through the model; per-window partial sums are then
    accumulated in window order with compensated summation, so threaded and
    sequential runs produce the same total. With ``return_per_byte`` the
    result is ``(report, bits)`` where bits[i] is byte i's information.
    """
    data = bytes(corpus_bytes)
    n = len(data)
    if n == 0:
        raise ValueError("cannot score an empty corpus")
    c, s = int(context_len), int(stride)
    if c < 2:
        raise ValueError(f"context_len must be >= 2, got {c}")
    if not 1 <= s <= c:
        raise ValueError(f"stride must satisfy 1 <= stride <= context {c}, got {s}")
    if c > model.config.context_len:
        raise ValueError(
            f"context {c} exceeds the model's context_len {model.config.context_len}"
        )

    z = np.frombuffer(bytes([LEAD_BYTE]) + data, dtype=np.uint8)
    plan = list(_plan_windows(n, c, s))

    # Tasks: one input per window, plus a right-aligned context input whenever
    # a window must score its own first position (stride == context case).
    tasks = []  # (input slice, logit rows, scored z positions)
    for offset, end, lo, hi in plan:
        rows, positions = [], []
        for j in range(lo, hi):
            if j == offset:
                tasks.append(
                    (z[j - (c - 1) : j], np.array([c - 2]), np.array([j]))
                )
            else:
                rows.append(j - offset - 1)
                positions.append(j)
        if rows:
            tasks.append((z[offset:end], np.asarray(rows), np.asarray(positions)))

    per_byte = np.full(n, np.nan)

    def score_batch(batch):
        width = max(len(inp) for inp, _, _ in batch)
        stacked = np.zeros((len(batch), width), dtype=np.uint8)
        for i, (inp, _, _) in enumerate(batch):
            stacked[i, : len(inp)] = inp
        with torch.no_grad():
            logits = model.forward(stacked, mode="eval")
            for i, (_, rows, positions) in enumerate(batch):
                scored = logits[i, torch.from_numpy(rows)].double()
                logprobs = torch.log_softmax(scored, dim=-1)
                targets = torch.from_numpy(z[positions].astype(np.int64))
                picked = logprobs[torch.arange(len(positions)), targets]
                per_byte[positions - 1] = -(picked.numpy()) / LN2

    batches = [tasks[i : i + batch_size] for i in range(0, len(tasks), batch_size)]
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(score_batch, batches))
    else:
        for batch in batches:
            score_batch(batch)

    if np.isnan(per_byte).any():
        missing = int(np.isnan(per_byte).sum())
        raise AssertionError(f"{missing} corpus bytes were never scored")

    partials = (float(np.sum(per_byte[lo - 1 : hi - 1])) for _, _, lo, hi in plan)
    total_bits = _kahan_sum(partials)
    report = ScoreReport(
        total_bits=total_bits,
        scored_bytes=n,
        stride=s,
        context_len=c,
        bpb=total_bits / n,
    )
    if return_per_byte:
        return report, per_byte
    return report
