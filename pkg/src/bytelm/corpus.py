"""Raw-byte corpus handling: shard loading, word/byte accounting, window sampling.

Text is treated as opaque utf-8 bytes end to end. Nothing is lowercased,
normalized, or re-encoded; a corpus is exactly what is on disk.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Shards are joined with a single newline so sampled windows can span shard
# boundaries the same way they span sentence boundaries.
SHARD_SEPARATOR = b"\n"

_TOKEN_RE = re.compile(rb"[^ \t]+")
_SHARD_INDEX_RE = re.compile(r"-(\d+)-of-(\d+)")


class CorpusLayoutError(ValueError):
    """Shard names do not follow the expected lm1b-style layout."""


@dataclass(frozen=True)
class CorpusStats:
    """Sentence/word/byte accounting.

    ``words`` counts whitespace-separated tokens plus one end-of-sentence
    token per line; ``bytes`` counts raw bytes including newlines.
    """

    sentences: int
    words: int
    bytes: int

    def __add__(self, other: "CorpusStats") -> "CorpusStats":
        return CorpusStats(
            self.sentences + other.sentences,
            self.words + other.words,
            self.bytes + other.bytes,
        )

    def format_line(self) -> str:
        return f"sentences={self.sentences} words={self.words} bytes={self.bytes}"

    def to_record(self) -> str:
        return json.dumps(
            {"sentences": self.sentences, "words": self.words, "bytes": self.bytes}
        )


@dataclass(frozen=True)
class RawCorpus:
    """Ordered (shard_id, buffer) pairs holding exact on-disk byte content."""

    shards: tuple[tuple[str, bytes], ...]
    total_bytes: int

    @classmethod
    def from_shards(cls, shards: Iterable[tuple[str, bytes]]) -> "RawCorpus":
        frozen = tuple((str(sid), bytes(buf)) for sid, buf in shards)
        return cls(frozen, sum(len(buf) for _, buf in frozen))

    @classmethod
    def from_bytes(cls, data: bytes, shard_id: str = "data") -> "RawCorpus":
        return cls.from_shards([(shard_id, data)])

    def shard_ids(self) -> list[str]:
        return [sid for sid, _ in self.shards]

    def joined_bytes(self) -> bytes:
        """The sampling stream: shard buffers joined by one newline byte."""
        cached = getattr(self, "_joined", None)
        if cached is None:
            cached = SHARD_SEPARATOR.join(buf for _, buf in self.shards)
            object.__setattr__(self, "_joined", cached)
        return cached


@dataclass(frozen=True)
class WindowBatch:
    """Fixed-length byte windows sampled uniformly from a corpus stream."""

    windows: np.ndarray  # uint8, [batch_size, window_len]
    offsets: np.ndarray  # int64 start offsets into the joined stream
    seed: int

    @property
    def window_len(self) -> int:
        return int(self.windows.shape[1])

    def __len__(self) -> int:
        return int(self.windows.shape[0])


def load_corpus(paths: Sequence[str | Path]) -> RawCorpus:
    """Load files verbatim as byte shards, preserving the given order."""
    if not paths:
        raise ValueError("load_corpus: empty path list")
    shards = []
    for p in paths:
        path = Path(p)
        shards.append((path.name, path.read_bytes()))
    return RawCorpus.from_shards(shards)


def corpus_stats(corpus: RawCorpus | bytes) -> CorpusStats:
    """Count sentences, words (tokens + one EOS per line), and raw bytes.

    A final line without a trailing newline still counts as one sentence.
    For a multi-shard corpus the per-shard stats are summed, so the counts
    are additive over newline-terminated files.
    """
    if isinstance(corpus, RawCorpus):
        total = CorpusStats(0, 0, 0)
        for _, buf in corpus.shards:
            total = total + corpus_stats(buf)
        return total

    data = bytes(corpus)
    pieces = data.split(b"\n")
    lines = pieces[:-1]
    if pieces[-1]:
        lines.append(pieces[-1])
    words = sum(len(_TOKEN_RE.findall(line)) + 1 for line in lines)
    return CorpusStats(sentences=len(lines), words=words, bytes=len(data))


def sample_windows(
    corpus: RawCorpus | bytes, window_len: int, batch_size: int, seed: int
) -> WindowBatch:
    """Draw ``batch_size`` windows with uniformly random start offsets.

    Sampling is with replacement and deterministic given the seed. Windows
    may span sentence and shard boundaries.
    """
    if window_len < 1:
        raise ValueError(f"window_len must be >= 1, got {window_len}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    stream = corpus.joined_bytes() if isinstance(corpus, RawCorpus) else bytes(corpus)
    if len(stream) < window_len:
        raise ValueError(
            f"corpus stream of {len(stream)} bytes is shorter than window_len {window_len}"
        )
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, len(stream) - window_len + 1, size=batch_size, dtype=np.int64)
    buf = np.frombuffer(stream, dtype=np.uint8)
    windows = np.stack([buf[o : o + window_len] for o in offsets])
    return WindowBatch(windows=windows, offsets=offsets, seed=seed)


def _classify_shards(corpus: RawCorpus):
    train, holdout = [], {}
    for sid, buf in corpus.shards:
        match = _SHARD_INDEX_RE.search(sid)
        if match is None:
            continue
        index = int(match.group(1))
        if "heldout" in sid:
            holdout[index] = (sid, buf)
        elif index >= 1:
            train.append((sid, buf))
    return train, holdout


def select_split(corpus: RawCorpus, split: str) -> RawCorpus:
    """Select the lm1b-convention sub-corpus.

    train: shards 01-99; test: holdout-of-holdout shard 00; dev: holdout
    shard 01. Shards are recognized by a ``-NNNNN-of-NNNNN`` name component,
    with ``heldout`` in the name marking holdout shards.
    """
    if split not in ("train", "dev", "test"):
        raise ValueError(f"split must be train, dev, or test, got {split!r}")
    train, holdout = _classify_shards(corpus)
    if split == "train":
        if not train:
            raise CorpusLayoutError(
                f"no training shards (indices 01-99) among: {corpus.shard_ids()}"
            )
        return RawCorpus.from_shards(train)
    want = 0 if split == "test" else 1
    if want not in holdout:
        raise CorpusLayoutError(
            f"split {split!r} needs holdout shard {want:05d}; "
            f"available shards: {corpus.shard_ids()}"
        )
    return RawCorpus.from_shards([holdout[want]])
