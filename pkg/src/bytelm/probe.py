"""Word-representation probing via the append-a-space procedure.

A word's representation is the activation at the trailing space position of
``utf8(word) + " "`` taken from a layer's feed-forward output stream; the
causal mask makes that position the only one that has seen the whole word.
Representations are compared with cosine similarity and ranked against human
ratings with Spearman's rho. Words are used verbatim: no lowercasing, and no
pair is ever discarded.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import stats

from .model import ByteTransformer


@dataclass(frozen=True)
class WordPair:
    word_a: str
    word_b: str
    human_score: float


@dataclass(frozen=True)
class WordSimDataset:
    """A named word-similarity benchmark: word pairs with human ratings."""

    name: str
    pairs: tuple[WordPair, ...]

    def words(self) -> set[str]:
        return {w for p in self.pairs for w in (p.word_a, p.word_b)}


@dataclass(frozen=True)
class DatasetScore:
    """Spearman's rho for one (dataset, layer) cell, with the pair counter."""

    dataset: str
    layer_index: int
    rho: float
    pairs_used: int


@dataclass(frozen=True)
class LayerSweepTable:
    """Rows of (layer_index, dataset, rho), sorted by (layer, dataset)."""

    rows: tuple[tuple[int, str, float], ...]

    def rho(self, layer_index: int, dataset: str) -> float:
        for layer, name, value in self.rows:
            if layer == layer_index and name == dataset:
                return value
        raise KeyError(f"no row for layer {layer_index}, dataset {dataset!r}")

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["layer", "dataset", "rho"])
        for layer, name, value in self.rows:
            writer.writerow([layer, name, repr(value)])
        return out.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def load_word_pairs(path: str | Path, name: str | None = None) -> WordSimDataset:
    """Parse ``word_a<TAB or comma>word_b<sep>score`` lines.

    Lines starting with '#' and one optional header line are skipped. Words
    are taken verbatim.
    """
    path = Path(path)
    pairs: list[WordPair] = []
    header_budget = 1
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cells = line.split("\t") if "\t" in line else line.split(",")
        cells = [c.strip() for c in cells]
        score = None
        if len(cells) >= 3 and cells[0] and cells[1]:
            try:
                score = float(cells[2])
            except ValueError:
                score = None
        if score is None:
            if header_budget and not pairs:
                header_budget = 0
                continue
            raise ValueError(f"{path}:{lineno}: malformed word-pair line: {raw!r}")
        pairs.append(WordPair(cells[0], cells[1], score))
    if len(pairs) < 2:
        raise ValueError(f"{path}: need at least 2 word pairs, found {len(pairs)}")
    return WordSimDataset(name=name or path.stem, pairs=tuple(pairs))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"vectors must share one dimension, got {a.shape} and {b.shape}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.dot(a, b) / (norm_a * norm_b))


def spearman_rho(xs, ys) -> float:
    """Pearson correlation of average ranks (ties get fractional ranks)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 1 or xs.shape != ys.shape:
        raise ValueError(f"inputs must share one dimension, got {xs.shape} and {ys.shape}")
    if xs.size < 2:
        raise ValueError("need at least 2 observations")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise ValueError("rho is undefined for constant input")
    return float(stats.spearmanr(xs, ys).statistic)


def word_to_bytes(word: str) -> bytes:
    """utf-8 bytes of the word plus the trailing space anchor."""
    if not word:
        raise ValueError("word is empty")
    if " " in word:
        raise ValueError(f"word contains a space: {word!r}")
    return word.encode("utf-8") + b" "


def extract_word_representation(
    model: ByteTransformer, word: str, layer_index: int
) -> np.ndarray:
    """The space-position activation of the given layer, as float64 [hidden]."""
    data = word_to_bytes(word)
    if len(data) > model.config.context_len:
        raise ValueError(
            f"word {word!r} needs {len(data)} bytes, model context is "
            f"{model.config.context_len}"
        )
    trace = model.hidden_activation(data, layer_index)
    return trace.vectors[-1].astype(np.float64)


def _all_layer_representations(model: ByteTransformer, word: str) -> np.ndarray:
    """One forward pass: the word's space-position vector at every layer, [L, hidden]."""
    data = word_to_bytes(word)
    if len(data) > model.config.context_len:
        raise ValueError(
            f"word {word!r} needs {len(data)} bytes, model context is "
            f"{model.config.context_len}"
        )
    with torch.no_grad():
        _, activations = model.forward(data, mode="eval", collect_activations=True)
    return np.stack([a[-1].numpy() for a in activations]).astype(np.float64)


def evaluate_dataset(
    model: ByteTransformer, dataset: WordSimDataset, layer_index: int
) -> DatasetScore:
    """Spearman's rho between model cosine similarities and human ratings.

    All pairs are used; a degenerate pair aborts with the words named.
    """
    reps = {w: extract_word_representation(model, w, layer_index) for w in sorted(dataset.words())}
    sims, human = [], []
    for pair in dataset.pairs:
        try:
            sims.append(cosine_similarity(reps[pair.word_a], reps[pair.word_b]))
        except ValueError as exc:
            raise ValueError(
                f"degenerate pair ({pair.word_a!r}, {pair.word_b!r}) "
                f"in dataset {dataset.name!r}: {exc}"
            ) from exc
        human.append(pair.human_score)
    return DatasetScore(
        dataset=dataset.name,
        layer_index=layer_index,
        rho=spearman_rho(sims, human),
        pairs_used=len(dataset.pairs),
    )


def layer_sweep(
    model: ByteTransformer,
    datasets: Sequence[WordSimDataset],
    layers: str | Iterable[int] = "all",
) -> LayerSweepTable:
    """rho for every (layer, dataset) cell.

    Each unique word across all datasets is embedded exactly once: a single
    forward pass yields its vectors for all layers.
    """
    if layers == "all":
        wanted = list(range(1, model.config.num_layers + 1))
    else:
        wanted = sorted({int(l) for l in layers})
    for layer in wanted:
        if not 1 <= layer <= model.config.num_layers:
            raise IndexError(
                f"layer {layer} outside [1, {model.config.num_layers}]"
            )
    if not wanted:
        raise ValueError("no layers requested")

    words = sorted({w for ds in datasets for w in ds.words()})
    reps = {w: _all_layer_representations(model, w) for w in words}

    rows = []
    for ds in datasets:
        human = [p.human_score for p in ds.pairs]
        for layer in wanted:
            sims = []
            for pair in ds.pairs:
                try:
                    sims.append(
                        cosine_similarity(
                            reps[pair.word_a][layer - 1], reps[pair.word_b][layer - 1]
                        )
                    )
                except ValueError as exc:
                    raise ValueError(
                        f"degenerate pair ({pair.word_a!r}, {pair.word_b!r}) "
                        f"in dataset {ds.name!r} at layer {layer}: {exc}"
                    ) from exc
            rows.append((layer, ds.name, spearman_rho(sims, human)))
    rows.sort(key=lambda row: (row[0], row[1]))
    return LayerSweepTable(rows=tuple(rows))
