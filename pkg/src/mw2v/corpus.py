"""Slice-partitioned corpora: tokenization, vocabularies, and sampling.

A corpus is split into named *slices* (years, newspapers, dialects — an
unordered set). Each slice gets its own frequency-ranked vocabulary, a
smoothed unigram noise distribution, and a deterministic stream of
skip-gram training pairs. A global vocabulary indexes the union of the
slice vocabularies and carries the local-to-global index maps.

Index conventions: local indices run 1..|V_s| and global indices 1..|V|,
matching the vocabulary TSV formats. Embedding matrices subtract one when
addressing rows.
"""

from __future__ import annotations

import json
import math
import unicodedata
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "SliceCorpus",
    "SliceVocabulary",
    "VocabularyIndex",
    "NoiseDistribution",
    "TrainingPair",
    "tokenize",
    "build_slice_vocab",
    "merge_global_vocab",
    "noise_distribution",
    "subsample_keep_prob",
    "generate_pairs",
    "sample_negatives",
    "slice_stream_seed",
    "read_jsonl_corpus",
    "read_plain_corpus",
    "corpus_from_texts",
    "write_vocab_tsv",
]

RESERVED_SLICE_PREFIX = "__"


def _check_slice_id(slice_id: str) -> str:
    if not isinstance(slice_id, str) or not slice_id:
        raise ValueError("slice id must be a non-empty string")
    if slice_id.startswith(RESERVED_SLICE_PREFIX):
        raise ValueError(f"slice id {slice_id!r} uses the reserved '__' prefix")
    return slice_id


def _is_punct(char: str) -> bool:
    return unicodedata.category(char).startswith("P")


def tokenize(raw_text: str) -> list[str]:
    """Lowercase, split on whitespace, and trim punctuation off token edges.

    Interior punctuation survives ("u.s." -> "u.s", "don't" -> "don't");
    tokens that are nothing but punctuation are dropped; digits are kept.
    """
    tokens = []
    for piece in raw_text.lower().split():
        start, end = 0, len(piece)
        while start < end and _is_punct(piece[start]):
            start += 1
        while end > start and _is_punct(piece[end - 1]):
            end -= 1
        if end > start:
            tokens.append(piece[start:end])
    return tokens


@dataclass
class SliceCorpus:
    """Tokenized documents belonging to one slice, in ingestion order."""

    slice_id: str
    documents: list[list[str]]

    def __post_init__(self) -> None:
        _check_slice_id(self.slice_id)
        for doc in self.documents:
            for token in doc:
                if not token:
                    raise ValueError(f"slice {self.slice_id!r} contains an empty token")

    def token_count(self) -> int:
        return sum(len(doc) for doc in self.documents)


@dataclass
class SliceVocabulary:
    """Frequency-ranked vocabulary of one slice.

    ``words`` is ordered by descending count with lexicographic tie-break;
    ``g_s`` maps each word to its 1-based rank, and ``total`` is the
    in-vocabulary token mass that defines the slice unigram distribution.
    """

    slice_id: str
    words: list[str]
    counts: dict[str, int]
    g_s: dict[str, int]
    total: int

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.g_s

    def frequency(self, word: str) -> float:
        return self.counts[word] / self.total


def build_slice_vocab(corpus: SliceCorpus, max_size: int) -> SliceVocabulary:
    """Keep the ``max_size`` most frequent tokens of the slice, rank-indexed."""
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    counter: Counter[str] = Counter()
    for doc in corpus.documents:
        counter.update(doc)
    if not counter:
        raise ValueError(f"empty slice: {corpus.slice_id!r} has no tokens")
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    words = [w for w, _ in ranked]
    counts = dict(ranked)
    g_s = {w: i for i, w in enumerate(words, start=1)}
    return SliceVocabulary(corpus.slice_id, words, counts, g_s, total=sum(counts.values()))


@dataclass
class VocabularyIndex:
    """Union vocabulary over all slices with the dual index maps.

    ``g`` maps words to 1-based global indices ordered by total count
    (descending, ties lexicographic). ``idx`` holds, per slice, the array
    mapping local index ``i`` (at offset ``i - 1``) to its global index,
    i.e. ``idx[s][i - 1] == g[g_s_inverse(i)]``.
    """

    global_words: list[str]
    total_counts: dict[str, int]
    g: dict[str, int]
    idx: dict[str, np.ndarray]
    slice_vocabs: dict[str, SliceVocabulary]

    def __len__(self) -> int:
        return len(self.global_words)

    @property
    def slices(self) -> list[str]:
        return list(self.slice_vocabs)

    def word_of(self, global_index: int) -> str:
        return self.global_words[global_index - 1]


def merge_global_vocab(slice_vocabs: Iterable[SliceVocabulary]) -> VocabularyIndex:
    """Merge slice vocabularies into the global index.

    Slices are kept in sorted-id order so every derived structure (index
    maps, table layouts, file formats) is independent of input order.
    """
    vocabs = {v.slice_id: v for v in sorted(slice_vocabs, key=lambda v: v.slice_id)}
    if not vocabs:
        raise ValueError("at least one slice vocabulary is required")
    totals: Counter[str] = Counter()
    for vocab in vocabs.values():
        totals.update(vocab.counts)
    ranked = sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))
    global_words = [w for w, _ in ranked]
    g = {w: i for i, w in enumerate(global_words, start=1)}
    idx = {
        sid: np.array([g[w] for w in vocab.words], dtype=np.int64)
        for sid, vocab in vocabs.items()
    }
    return VocabularyIndex(global_words, dict(ranked), g, idx, vocabs)


@dataclass
class NoiseDistribution:
    """Smoothed unigram distribution of one slice, ready for sampling.

    ``probabilities[i - 1]`` is the draw probability of local index ``i``;
    the probabilities are proportional to count**(3/4) and sum to one.
    """

    slice_id: str
    probabilities: np.ndarray
    cumulative: np.ndarray

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` local indices (1-based)."""
        u = rng.random(n)
        return np.searchsorted(self.cumulative, u, side="right") + 1


def noise_distribution(vocab: SliceVocabulary) -> NoiseDistribution:
    counts = np.array([vocab.counts[w] for w in vocab.words], dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise ValueError("noise distribution needs a non-empty vocabulary with positive counts")
    weights = counts ** 0.75
    probabilities = weights / weights.sum()
    cumulative = np.cumsum(probabilities)
    cumulative[-1] = 1.0  # guard searchsorted against cumsum rounding
    return NoiseDistribution(vocab.slice_id, probabilities, cumulative)


def subsample_keep_prob(word_freq: float, t: float) -> float:
    """Keep-probability for a token occurrence under frequency subsampling.

    ``min(1, sqrt(t/f) + t/f)``; pass ``t=math.inf`` to disable subsampling.
    """
    if not 0.0 < word_freq <= 1.0:
        raise ValueError("word_freq must be in (0, 1]")
    if not t > 0.0:
        raise ValueError("sample factor t must be > 0")
    ratio = t / word_freq
    return min(1.0, math.sqrt(ratio) + ratio)


@dataclass(frozen=True, slots=True)
class TrainingPair:
    """One (target, context) sample; indices are 1-based local indices."""

    slice_id: str
    input: int
    output: int
    label: str  # "positive" or "negative"


def generate_pairs(
    corpus: SliceCorpus,
    vocab: SliceVocabulary,
    window: int,
    subsample_t: float,
    seed,
) -> Iterator[TrainingPair]:
    """Yield the positive skip-gram pairs of one slice, deterministically.

    Out-of-vocabulary tokens are removed before windowing. Each remaining
    occurrence is then kept or dropped by one seeded draw against its
    subsampling keep-probability; a pair is emitted for every offset in
    ``[-window, window]`` whose both endpoints were kept.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if corpus.slice_id != vocab.slice_id:
        raise ValueError("corpus and vocabulary belong to different slices")
    rng = np.random.default_rng(seed)
    keep = np.array(
        [subsample_keep_prob(vocab.frequency(w), subsample_t) for w in vocab.words]
    )
    g_s = vocab.g_s
    sid = corpus.slice_id
    for doc in corpus.documents:
        local = np.array([g_s[tok] for tok in doc if tok in g_s], dtype=np.int64)
        n = local.size
        if n == 0:
            continue
        retained = rng.random(n) < keep[local - 1]
        for t0 in range(n):
            if not retained[t0]:
                continue
            lo = 0 if t0 < window else t0 - window
            hi = min(n, t0 + window + 1)
            for t1 in range(lo, hi):
                if t1 == t0 or not retained[t1]:
                    continue
                yield TrainingPair(sid, int(local[t0]), int(local[t1]), "positive")


def sample_negatives(
    batch: Sequence[TrainingPair],
    noise: NoiseDistribution,
    ratio: float = 0.75,
    rng: int | np.random.Generator = 0,
) -> list[TrainingPair]:
    """Draw ``floor(ratio * len(batch))`` negatives for a positive batch.

    Inputs are recycled from the positive batch in order; outputs are
    independent draws from the slice noise distribution.
    """
    if ratio < 0:
        raise ValueError("ratio must be >= 0")
    if not batch:
        return []
    if batch[0].slice_id != noise.slice_id:
        raise ValueError("noise distribution does not match the batch slice")
    gen = np.random.default_rng(rng)
    n = int(math.floor(ratio * len(batch)))
    if n == 0:
        return []
    outputs = noise.sample(gen, n)
    size = len(batch)
    return [
        TrainingPair(noise.slice_id, batch[i % size].input, int(outputs[i]), "negative")
        for i in range(n)
    ]


def slice_stream_seed(seed: int, slice_id: str) -> int:
    """Per-slice stream seed: base seed XOR a stable hash of the slice id."""
    return seed ^ zlib.crc32(slice_id.encode("utf-8"))


# ---------------------------------------------------------------------------
# Corpus and vocabulary I/O
# ---------------------------------------------------------------------------

def corpus_from_texts(slice_id: str, texts: Iterable[str]) -> SliceCorpus:
    """Build a slice corpus by tokenizing raw strings, one document each."""
    return SliceCorpus(slice_id, [tokenize(text) for text in texts])


def read_jsonl_corpus(*paths: str | Path) -> dict[str, SliceCorpus]:
    """Read JSON-lines corpora ({"slice": id, "text": raw}) grouped by slice."""
    documents: dict[str, list[list[str]]] = {}
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from None
                if not isinstance(record, dict) or "slice" not in record or "text" not in record:
                    raise ValueError(f"{path}:{lineno}: expected an object with 'slice' and 'text'")
                documents.setdefault(str(record["slice"]), []).append(tokenize(record["text"]))
    if not documents:
        raise ValueError("no documents found")
    return {sid: SliceCorpus(sid, docs) for sid, docs in sorted(documents.items())}


def read_plain_corpus(slice_id: str, path: str | Path) -> SliceCorpus:
    """Read one plain-text file as a slice, one document per line."""
    with open(path, encoding="utf-8") as fh:
        docs = [tokenize(line) for line in fh if line.strip()]
    return SliceCorpus(slice_id, docs)


def write_vocab_tsv(vocab: VocabularyIndex, out_dir: str | Path) -> list[Path]:
    """Write the global and per-slice vocabulary TSVs; returns written paths.

    Global rows are ``global_index<TAB>word<TAB>total_count``; slice rows
    are ``local_index<TAB>word<TAB>count``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "vocab.global.tsv"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, word in enumerate(vocab.global_words, start=1):
            fh.write(f"{i}\t{word}\t{vocab.total_counts[word]}\n")
    written.append(path)
    for sid, svocab in vocab.slice_vocabs.items():
        path = out / f"vocab.{sid}.tsv"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, word in enumerate(svocab.words, start=1):
                fh.write(f"{i}\t{word}\t{svocab.counts[word]}\n")
        written.append(path)
    return written
