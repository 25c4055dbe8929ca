"""Star-structured embedding tables and their training loop.

Every word owns a central vector shared by all slices; each slice adds a
drift vector on top, so the effective representation of word ``w`` in
slice ``s`` is ``central[w] + delta[s][w]`` (separately for the input and
the output side). Training maximizes a skip-gram negative-sampling
objective plus a penalty ``-lambda * sum ||delta||^2`` that ties the
slices together. Drift rows of words absent from a slice's vocabulary are
never touched, so they stay exactly zero.
"""

from __future__ import annotations

import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .corpus import (
    NoiseDistribution,
    SliceCorpus,
    SliceVocabulary,
    TrainingPair,
    VocabularyIndex,
    build_slice_vocab,
    generate_pairs,
    merge_global_vocab,
    noise_distribution,
    sample_negatives,
    slice_stream_seed,
)

__all__ = [
    "TrainingConfig",
    "EmbeddingTables",
    "OptimizerState",
    "LossBreakdown",
    "TrainResult",
    "TrainingDiverged",
    "ModelFormatError",
    "init_tables",
    "compose",
    "score_pair",
    "loss",
    "gradients",
    "adam_step",
    "clr_lr",
    "train",
    "save_model",
    "load_model",
    "export_text",
    "export_json",
]

MODEL_MAGIC = b"MW2V"
MODEL_FORMAT_VERSION = 1

# stream tags appended to per-slice seeds so pair generation, negative
# sampling and initialization never share a generator
_INIT_STREAM = 0
_PAIR_STREAM = 1
_NEG_STREAM = 2


class ModelFormatError(ValueError):
    """Raised for unreadable, corrupted or incompatible model files."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, slice_id: str):
        super().__init__(
            f"numerical divergence at epoch {epoch}, batch {batch} (slice {slice_id!r})"
        )
        self.epoch = epoch
        self.batch = batch
        self.slice_id = slice_id


@dataclass
class TrainingConfig:
    """All training hyperparameters; defaults follow the method where stated."""

    dim: int = 48
    window: int = 4
    reg_lambda: float = 1e-9
    negative_ratio: float = 0.75
    subsample_t: float = 1e-5
    epochs: int = 5
    batch_size: int = 512
    vocab_size: int = 20000
    base_lr: float = 1e-4
    max_lr: float = 1e-2
    cycle_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    init_scale: float = 0.5
    regularize_output: bool = False
    # optional per-(slice, word) regularization override; words not listed
    # fall back to reg_lambda
    reg_lambda_map: dict[str, dict[str, float]] | None = None

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")
        if self.negative_ratio < 0:
            raise ValueError("negative_ratio must be >= 0")
        if not self.subsample_t > 0:
            raise ValueError("subsample_t must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.vocab_size < 1 or self.cycle_steps < 2:
            raise ValueError("batch_size, vocab_size and cycle_steps must be positive (cycle_steps >= 2)")
        if not 0 < self.base_lr <= self.max_lr:
            raise ValueError("need 0 < base_lr <= max_lr")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam parameters")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["subsample_t"] == float("inf"):
            out["subsample_t"] = "inf"
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainingConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        payload = dict(data)
        if payload.get("subsample_t") == "inf":
            payload["subsample_t"] = float("inf")
        return cls(**payload)


@dataclass
class EmbeddingTables:
    """Central and per-slice drift tables, all shaped (|V|, dim).

    ``member_rows[s]`` lists, in local-index order, the 0-based matrix rows
    of the words in slice ``s``'s vocabulary; every other row of the drift
    tables is frozen at exactly zero.
    """

    dim: int
    central_in: np.ndarray
    central_out: np.ndarray
    delta_in: dict[str, np.ndarray]
    delta_out: dict[str, np.ndarray]
    member_rows: dict[str, np.ndarray]

    @property
    def slices(self) -> list[str]:
        return list(self.delta_in)

    @property
    def n_words(self) -> int:
        return self.central_in.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.central_in.dtype

    def frozen_rows(self, slice_id: str) -> np.ndarray:
        mask = np.ones(self.n_words, dtype=bool)
        mask[self.member_rows[slice_id]] = False
        return np.nonzero(mask)[0]

    def copy(self) -> "EmbeddingTables":
        return EmbeddingTables(
            self.dim,
            self.central_in.copy(),
            self.central_out.copy(),
            {s: a.copy() for s, a in self.delta_in.items()},
            {s: a.copy() for s, a in self.delta_out.items()},
            {s: a.copy() for s, a in self.member_rows.items()},
        )


@dataclass
class OptimizerState:
    """Adam first/second moment accumulators plus the global step counter."""

    m: dict[tuple, np.ndarray]
    v: dict[tuple, np.ndarray]
    step: int = 0


@dataclass(frozen=True)
class LossBreakdown:
    pos: float
    neg: float
    reg: float

    @property
    def total(self) -> float:
        return self.pos + self.neg + self.reg

    def to_dict(self) -> dict:
        return {"pos": self.pos, "neg": self.neg, "reg": self.reg, "total": self.total}


def _table_keys(tables: EmbeddingTables) -> list[tuple]:
    keys: list[tuple] = [("central_in",), ("central_out",)]
    for sid in tables.slices:
        keys.append(("delta_in", sid))
        keys.append(("delta_out", sid))
    return keys


def _param(tables: EmbeddingTables, key: tuple) -> np.ndarray:
    if key[0] == "central_in":
        return tables.central_in
    if key[0] == "central_out":
        return tables.central_out
    if key[0] == "delta_in":
        return tables.delta_in[key[1]]
    if key[0] == "delta_out":
        return tables.delta_out[key[1]]
    raise KeyError(key)


def init_tables(
    config: TrainingConfig,
    vocab: VocabularyIndex,
    dtype: np.dtype = np.float32,
) -> tuple[EmbeddingTables, OptimizerState]:
    """Seeded initialization: uniform central tables, all-zero drift tables.

    Central entries are uniform in [-init_scale/dim, +init_scale/dim].
    """
    n, d = len(vocab), config.dim
    rng = np.random.default_rng([config.seed, _INIT_STREAM])
    bound = config.init_scale / d
    central_in = rng.uniform(-bound, bound, size=(n, d)).astype(dtype)
    central_out = rng.uniform(-bound, bound, size=(n, d)).astype(dtype)
    member_rows = {sid: (vocab.idx[sid] - 1).astype(np.int64) for sid in vocab.slices}
    delta_in = {sid: np.zeros((n, d), dtype=dtype) for sid in vocab.slices}
    delta_out = {sid: np.zeros((n, d), dtype=dtype) for sid in vocab.slices}
    tables = EmbeddingTables(d, central_in, central_out, delta_in, delta_out, member_rows)
    state = OptimizerState(
        m={k: np.zeros((n, d)) for k in _table_keys(tables)},
        v={k: np.zeros((n, d)) for k in _table_keys(tables)},
    )
    return tables, state


def compose(tables: EmbeddingTables, slice_id: str, word: int, side: str = "in") -> np.ndarray:
    """Effective vector of a word (1-based global index) in one slice.

    For words outside the slice vocabulary the drift row is zero, so the
    result equals the central vector.
    """
    if slice_id not in tables.delta_in:
        raise ValueError(f"unknown slice {slice_id!r}")
    if side not in ("in", "out"):
        raise ValueError("side must be 'in' or 'out'")
    row = word - 1
    if not 0 <= row < tables.n_words:
        raise ValueError(f"global index {word} out of range")
    if side == "in":
        return tables.central_in[row] + tables.delta_in[slice_id][row]
    return tables.central_out[row] + tables.delta_out[slice_id][row]


def score_pair(tables: EmbeddingTables, slice_id: str, input_word: int, output_word: int) -> float:
    """Dot product of the composed output vector with the composed input vector."""
    vin = compose(tables, slice_id, input_word, "in").astype(np.float64)
    vout = compose(tables, slice_id, output_word, "out").astype(np.float64)
    return float(vout @ vin)


def _group_pairs(pairs: Sequence[TrainingPair]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    by_slice: dict[str, tuple[list[int], list[int]]] = {}
    for p in pairs:
        ins, outs = by_slice.setdefault(p.slice_id, ([], []))
        ins.append(p.input)
        outs.append(p.output)
    return {
        sid: (np.asarray(i, dtype=np.int64), np.asarray(o, dtype=np.int64))
        for sid, (i, o) in sorted(by_slice.items())
    }


def _resolve_lambda(
    reg_lambda: float | Mapping[str, np.ndarray], slice_id: str, n_rows: int
):
    """Per-member-row penalty weights for one slice (scalar or vector)."""
    if isinstance(reg_lambda, Mapping):
        lam = reg_lambda[slice_id]
        return np.asarray(lam, dtype=np.float64)
    return float(reg_lambda)


def _coalesce(entries: list[tuple[np.ndarray, np.ndarray]], dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum sparse (rows, matrix) gradient pieces over the union of rows."""
    rows = np.unique(np.concatenate([r for r, _ in entries]))
    mat = np.zeros((rows.size, dim))
    for r, m in entries:
        mat[np.searchsorted(rows, r)] += m
    return rows, mat


def _loss_and_grads(
    tables: EmbeddingTables,
    positives: Sequence[TrainingPair],
    negatives: Sequence[TrainingPair],
    reg_lambda,
    regularize_output: bool,
    want_grads: bool,
    reg_slices: Iterable[str] | None = None,
):
    """Objective value and (optionally) its exact gradient for one batch.

    Both the positive and the negative log-sigmoid sums are normalized by
    the positive-pair count, so the negatives-per-positives ratio carries
    the same relative weight it has in the per-position objective. The
    penalty term spans every slice in ``reg_slices`` (default: all) and is
    not batch-normalized; its effective strength is per optimizer step.
    """
    d = tables.dim
    denom = max(1, len(positives))
    pos_groups = _group_pairs(positives)
    neg_groups = _group_pairs(negatives)
    pos_sum = 0.0
    neg_sum = 0.0
    central_in_parts: list[tuple[np.ndarray, np.ndarray]] = []
    central_out_parts: list[tuple[np.ndarray, np.ndarray]] = []
    grads: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
    delta_parts: dict[tuple, list[tuple[np.ndarray, np.ndarray]]] = {}

    for sid in sorted(set(pos_groups) | set(neg_groups)):
        if sid not in tables.delta_in:
            raise ValueError(f"unknown slice {sid!r}")
        rows_map = tables.member_rows[sid]
        gi_parts, go_parts, coef_parts = [], [], []
        for groups, sign in ((pos_groups, 1.0), (neg_groups, -1.0)):
            if sid not in groups:
                continue
            loc_in, loc_out = groups[sid]
            gin = rows_map[loc_in - 1]
            gout = rows_map[loc_out - 1]
            vin = tables.central_in[gin].astype(np.float64) + tables.delta_in[sid][gin].astype(np.float64)
            vout = tables.central_out[gout].astype(np.float64) + tables.delta_out[sid][gout].astype(np.float64)
            scores = np.einsum("ij,ij->i", vin, vout)
            if sign > 0:
                pos_sum += float(log_expit(scores).sum())
                coef = expit(-scores) / denom  # d log sigma(x) / dx
            else:
                neg_sum += float(log_expit(-scores).sum())
                coef = -expit(scores) / denom  # d log sigma(-x) / dx
            if want_grads:
                gi_parts.append((gin, coef[:, None] * vout))
                go_parts.append((gout, coef[:, None] * vin))
            coef_parts.append(coef)
        if want_grads and gi_parts:
            rows_in, mat_in = _coalesce(gi_parts, d)
            rows_out, mat_out = _coalesce(go_parts, d)
            delta_parts[("delta_in", sid)] = [(rows_in, mat_in)]
            delta_parts[("delta_out", sid)] = [(rows_out, mat_out)]
            central_in_parts.append((rows_in, mat_in))
            central_out_parts.append((rows_out, mat_out))

    # penalty over drift tables; touches every member row of each slice
    reg_sum = 0.0
    reg_active = isinstance(reg_lambda, Mapping) or float(reg_lambda) != 0.0
    if reg_active:
        slices = tables.slices if reg_slices is None else list(reg_slices)
        for sid in slices:
            rows = tables.member_rows[sid]
            lam = _resolve_lambda(reg_lambda, sid, rows.size)
            targets = [("delta_in", sid)]
            if regularize_output:
                targets.append(("delta_out", sid))
            for key in targets:
                delta = _param(tables, key)[rows].astype(np.float64)
                sq = (delta * delta).sum(axis=1)
                reg_sum -= float((lam * sq).sum())
                if want_grads:
                    gmat = (-2.0 * np.broadcast_to(np.atleast_1d(lam), (rows.size,))[:, None]) * delta
                    delta_parts.setdefault(key, []).append((rows, gmat))

    breakdown = LossBreakdown(pos=pos_sum / denom, neg=neg_sum / denom, reg=reg_sum)
    if not np.isfinite(breakdown.total):
        raise ValueError("numerical divergence: non-finite loss")
    if not want_grads:
        return breakdown, None

    for key, parts in delta_parts.items():
        grads[key] = _coalesce(parts, d) if len(parts) > 1 else parts[0]
    if central_in_parts:
        grads[("central_in",)] = _coalesce(central_in_parts, d)
        grads[("central_out",)] = _coalesce(central_out_parts, d)
    return breakdown, grads


def loss(
    tables: EmbeddingTables,
    positives: Sequence[TrainingPair],
    negatives: Sequence[TrainingPair],
    reg_lambda=0.0,
    *,
    regularize_output: bool = False,
) -> LossBreakdown:
    """Objective to be maximized: positive + negative log-likelihood terms
    (normalized by the positive-pair count) plus the non-positive penalty."""
    breakdown, _ = _loss_and_grads(
        tables, positives, negatives, reg_lambda, regularize_output, want_grads=False
    )
    return breakdown


def gradients(
    tables: EmbeddingTables,
    positives: Sequence[TrainingPair],
    negatives: Sequence[TrainingPair],
    reg_lambda=0.0,
    *,
    regularize_output: bool = False,
) -> dict[tuple, tuple[np.ndarray, np.ndarray]]:
    """Exact ascent gradients of :func:`loss` for every touched row.

    Keys are ``("central_in",)``, ``("central_out",)``, ``("delta_in", s)``
    and ``("delta_out", s)``; values are ``(rows, matrix)`` with unique
    0-based rows. Central gradients are the slice-wise sums of the drift
    gradients (penalty excluded), mirroring the chain rule through
    ``central + delta``.
    """
    _, grads = _loss_and_grads(
        tables, positives, negatives, reg_lambda, regularize_output, want_grads=True
    )
    return grads


def adam_step(
    tables: EmbeddingTables,
    state: OptimizerState,
    grads: Mapping[tuple, tuple[np.ndarray, np.ndarray]],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> EmbeddingTables:
    """Bias-corrected Adam ascent step over the touched rows (in place)."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for key, (rows, g) in grads.items():
        m = state.m[key]
        v = state.v[key]
        m[rows] = b1 * m[rows] + (1.0 - b1) * g
        v[rows] = b2 * v[rows] + (1.0 - b2) * (g * g)
        update = lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + eps)
        param = _param(tables, key)
        param[rows] += update.astype(param.dtype)
    return tables


def clr_lr(step: int, base_lr: float, max_lr: float, cycle_steps: int) -> float:
    """Triangular cyclical learning rate; ramps base->max->base each cycle."""
    if cycle_steps < 2:
        raise ValueError("cycle_steps must be >= 2")
    pos = step % cycle_steps
    half = cycle_steps / 2.0
    frac = pos / half if pos <= half else (cycle_steps - pos) / half
    return base_lr + (max_lr - base_lr) * frac


@dataclass
class TrainResult:
    tables: EmbeddingTables
    vocab: VocabularyIndex
    log: list[dict]


def _as_corpora(corpora) -> dict[str, SliceCorpus]:
    if isinstance(corpora, Mapping):
        items = list(corpora.values())
    else:
        items = list(corpora)
    out: dict[str, SliceCorpus] = {}
    for c in items:
        if not isinstance(c, SliceCorpus):
            raise TypeError("corpora must be SliceCorpus instances")
        if c.slice_id in out:
            raise ValueError(f"duplicate slice {c.slice_id!r}")
        out[c.slice_id] = c
    if not out:
        raise ValueError("at least one slice corpus is required")
    return dict(sorted(out.items()))


def _resolve_lambda_spec(config: TrainingConfig, vocab: VocabularyIndex):
    """Turn the config's constant-or-map penalty into per-slice row arrays."""
    if config.reg_lambda_map is None:
        return config.reg_lambda
    spec: dict[str, np.ndarray] = {}
    for sid, svocab in vocab.slice_vocabs.items():
        overrides = config.reg_lambda_map.get(sid, {})
        unknown = set(overrides) - set(svocab.g_s)
        if unknown:
            raise ValueError(f"reg_lambda_map names words outside slice {sid!r}: {sorted(unknown)}")
        lam = np.full(len(svocab), config.reg_lambda, dtype=np.float64)
        for word, value in overrides.items():
            lam[svocab.g_s[word] - 1] = value
        spec[sid] = lam
    return spec


def _epoch_batches(
    corpus: SliceCorpus,
    svocab: SliceVocabulary,
    config: TrainingConfig,
    epoch: int,
) -> list[list[TrainingPair]]:
    seed = [slice_stream_seed(config.seed, corpus.slice_id), epoch, _PAIR_STREAM]
    pairs = list(
        generate_pairs(corpus, svocab, config.window, config.subsample_t, seed)
    )
    size = config.batch_size
    return [pairs[i : i + size] for i in range(0, len(pairs), size)]


def train(
    corpora,
    config: TrainingConfig,
    *,
    n_workers: int = 1,
    dtype: np.dtype = np.float32,
) -> TrainResult:
    """Train the tables over all slices jointly.

    With ``n_workers == 1`` slices are interleaved round-robin and the run
    is bit-reproducible for a fixed seed. With more workers each slice
    trains on its own thread against the shared central tables without
    locking; results stay finite and drift-frozen but are not reproducible.
    """
    corpora = _as_corpora(corpora)
    slice_vocabs = {
        sid: build_slice_vocab(c, config.vocab_size) for sid, c in corpora.items()
    }
    vocab = merge_global_vocab(slice_vocabs.values())
    noise = {sid: noise_distribution(v) for sid, v in vocab.slice_vocabs.items()}
    tables, state = init_tables(config, vocab, dtype=dtype)
    reg = _resolve_lambda_spec(config, vocab)
    log: list[dict] = []
    if config.epochs == 0:
        return TrainResult(tables, vocab, log)
    if n_workers > 1:
        _train_parallel(corpora, vocab, noise, tables, state, config, reg, log, n_workers)
    else:
        _train_round_robin(corpora, vocab, noise, tables, state, config, reg, log)
    return TrainResult(tables, vocab, log)


def _train_round_robin(corpora, vocab, noise, tables, state, config, reg, log) -> None:
    betas = (config.beta1, config.beta2)
    slices = list(corpora)
    for epoch in range(config.epochs):
        batches = {
            sid: _epoch_batches(corpora[sid], vocab.slice_vocabs[sid], config, epoch)
            for sid in slices
        }
        neg_rng = {
            sid: np.random.default_rng(
                [slice_stream_seed(config.seed, sid), epoch, _NEG_STREAM]
            )
            for sid in slices
        }
        stats = {sid: {"pos": 0.0, "neg": 0.0, "batches": 0, "pairs": 0} for sid in slices}
        for round_idx in range(max(len(b) for b in batches.values())):
            for sid in slices:
                if round_idx >= len(batches[sid]):
                    continue
                batch = batches[sid][round_idx]
                negs = sample_negatives(
                    batch, noise[sid], config.negative_ratio, neg_rng[sid]
                )
                try:
                    breakdown, grads = _loss_and_grads(
                        tables, batch, negs, reg, config.regularize_output, want_grads=True
                    )
                except ValueError as exc:
                    raise TrainingDiverged(epoch, round_idx, sid) from exc
                lr = clr_lr(state.step, config.base_lr, config.max_lr, config.cycle_steps)
                adam_step(tables, state, grads, lr, betas, config.eps)
                stats[sid]["pos"] += breakdown.pos
                stats[sid]["neg"] += breakdown.neg
                stats[sid]["batches"] += 1
                stats[sid]["pairs"] += len(batch)
        log.append(_epoch_record(epoch, state.step, stats, tables, config, reg))


def _train_parallel(corpora, vocab, noise, tables, state, config, reg, log, n_workers) -> None:
    betas = (config.beta1, config.beta2)

    def run_slice(sid: str) -> dict:
        stats = {"pos": 0.0, "neg": 0.0, "batches": 0, "pairs": 0}
        for epoch in range(config.epochs):
            rng = np.random.default_rng(
                [slice_stream_seed(config.seed, sid), epoch, _NEG_STREAM]
            )
            for batch_idx, batch in enumerate(
                _epoch_batches(corpora[sid], vocab.slice_vocabs[sid], config, epoch)
            ):
                negs = sample_negatives(batch, noise[sid], config.negative_ratio, rng)
                try:
                    breakdown, grads = _loss_and_grads(
                        tables, batch, negs, reg, config.regularize_output,
                        want_grads=True, reg_slices=[sid],
                    )
                except ValueError as exc:
                    raise TrainingDiverged(epoch, batch_idx, sid) from exc
                lr = clr_lr(state.step, config.base_lr, config.max_lr, config.cycle_steps)
                adam_step(tables, state, grads, lr, betas, config.eps)
                stats["pos"] += breakdown.pos
                stats["neg"] += breakdown.neg
                stats["batches"] += 1
                stats["pairs"] += len(batch)
        return stats

    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        results = dict(zip(corpora, pool.map(run_slice, list(corpora))))
    log.append(_epoch_record(config.epochs - 1, state.step, results, tables, config, reg))


def _epoch_record(epoch, step, stats, tables, config, reg) -> dict:
    record = {"epoch": epoch, "step": step, "slices": {}}
    for sid, st in stats.items():
        n = max(1, st["batches"])
        breakdown = LossBreakdown(
            pos=st["pos"] / n,
            neg=st["neg"] / n,
            reg=regularization_term(tables, reg, [sid], config.regularize_output),
        )
        record["slices"][sid] = dict(breakdown.to_dict(), pairs=st["pairs"])
    return record


def regularization_term(
    tables: EmbeddingTables,
    reg_lambda,
    slices: Iterable[str] | None = None,
    regularize_output: bool = False,
) -> float:
    """Recompute ``-sum lambda * ||delta||^2`` over the given slices."""
    total = 0.0
    for sid in tables.slices if slices is None else slices:
        rows = tables.member_rows[sid]
        lam = _resolve_lambda(reg_lambda, sid, rows.size)
        tables_to_sum = [tables.delta_in[sid]]
        if regularize_output:
            tables_to_sum.append(tables.delta_out[sid])
        for table in tables_to_sum:
            sq = (table[rows].astype(np.float64) ** 2).sum(axis=1)
            total -= float((lam * sq).sum())
    return total


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _vocab_payload(vocab: VocabularyIndex) -> dict:
    return {
        "slices": vocab.slices,
        "global_words": vocab.global_words,
        "global_counts": [vocab.total_counts[w] for w in vocab.global_words],
        "slice_words": {s: v.words for s, v in vocab.slice_vocabs.items()},
        "slice_counts": {
            s: [v.counts[w] for w in v.words] for s, v in vocab.slice_vocabs.items()
        },
    }


def _vocab_from_payload(payload: Mapping) -> VocabularyIndex:
    slice_vocabs = {}
    for sid in payload["slices"]:
        words = payload["slice_words"][sid]
        counts = dict(zip(words, payload["slice_counts"][sid]))
        g_s = {w: i for i, w in enumerate(words, start=1)}
        slice_vocabs[sid] = SliceVocabulary(sid, list(words), counts, g_s, sum(counts.values()))
    global_words = list(payload["global_words"])
    totals = dict(zip(global_words, payload["global_counts"]))
    g = {w: i for i, w in enumerate(global_words, start=1)}
    idx = {
        sid: np.array([g[w] for w in v.words], dtype=np.int64)
        for sid, v in slice_vocabs.items()
    }
    return VocabularyIndex(global_words, totals, g, idx, slice_vocabs)


def save_model(
    tables: EmbeddingTables,
    vocab: VocabularyIndex,
    config: TrainingConfig,
    path: str | Path,
) -> Path:
    """Write the binary container; little-endian float32 matrices, CRC-sealed."""
    if tables.dtype != np.float32:
        raise ValueError(
            f"only float32 tables are serializable losslessly, got {tables.dtype}"
        )
    config_json = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    vocab_json = json.dumps(_vocab_payload(vocab), sort_keys=True).encode("utf-8")
    buf = bytearray()
    buf += MODEL_MAGIC
    buf += struct.pack("<I", MODEL_FORMAT_VERSION)
    buf += struct.pack("<I", len(config_json)) + config_json
    buf += struct.pack("<I", len(vocab_json)) + vocab_json
    matrices = [tables.central_in, tables.central_out]
    for sid in tables.slices:
        matrices.append(tables.delta_in[sid])
        matrices.append(tables.delta_out[sid])
    for arr in matrices:
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    out = Path(path)
    out.write_bytes(bytes(buf))
    return out


def load_model(path: str | Path) -> tuple[EmbeddingTables, VocabularyIndex, TrainingConfig]:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ModelFormatError("truncated model file")
    body, crc_bytes = raw[:-4], raw[-4:]
    (stored_crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ModelFormatError("checksum mismatch: model file is corrupted")
    if body[:4] != MODEL_MAGIC:
        raise ModelFormatError("bad magic: not a model file")
    (version,) = struct.unpack("<I", body[4:8])
    if version > MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported format version {version} (this build reads <= {MODEL_FORMAT_VERSION})"
        )
    offset = 8

    def read_block() -> bytes:
        nonlocal offset
        if offset + 4 > len(body):
            raise ModelFormatError("truncated model file")
        (length,) = struct.unpack("<I", body[offset : offset + 4])
        offset += 4
        block = body[offset : offset + length]
        if len(block) != length:
            raise ModelFormatError("truncated model file")
        offset += length
        return block

    config = TrainingConfig.from_dict(json.loads(read_block().decode("utf-8")))
    vocab = _vocab_from_payload(json.loads(read_block().decode("utf-8")))
    n, d = len(vocab), config.dim
    n_matrices = 2 + 2 * len(vocab.slices)
    expected = n_matrices * n * d * 4
    if len(body) - offset != expected:
        raise ModelFormatError("matrix payload size mismatch: model file is corrupted")

    def read_matrix() -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(body, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
        offset += n * d * 4
        return arr.copy()

    central_in = read_matrix()
    central_out = read_matrix()
    delta_in: dict[str, np.ndarray] = {}
    delta_out: dict[str, np.ndarray] = {}
    for sid in vocab.slices:
        delta_in[sid] = read_matrix()
        delta_out[sid] = read_matrix()
    member_rows = {sid: (vocab.idx[sid] - 1).astype(np.int64) for sid in vocab.slices}
    tables = EmbeddingTables(d, central_in, central_out, delta_in, delta_out, member_rows)
    return tables, vocab, config


# ---------------------------------------------------------------------------
# Text exports
# ---------------------------------------------------------------------------

def _fmt(value: float) -> str:
    return format(float(value), ".9g")


def export_text(tables: EmbeddingTables, vocab: VocabularyIndex, path: str | Path) -> Path:
    """TSV export: ``section<TAB>word<TAB>f1..fd`` rows.

    The section column is the slice id for composed input vectors and
    ``__central__`` for the shared table, so the file has exactly
    ``sum(|V_s|) + |V|`` lines. Nine significant digits round-trip float32
    exactly.
    """
    out = Path(path)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for sid in vocab.slices:
            rows = tables.member_rows[sid]
            composed = tables.central_in[rows] + tables.delta_in[sid][rows]
            for word, vec in zip(vocab.slice_vocabs[sid].words, composed):
                fh.write(f"{sid}\t{word}\t" + "\t".join(_fmt(x) for x in vec) + "\n")
        for word, vec in zip(vocab.global_words, tables.central_in):
            fh.write(f"__central__\t{word}\t" + "\t".join(_fmt(x) for x in vec) + "\n")
    return out


def export_json(tables: EmbeddingTables, vocab: VocabularyIndex, path: str | Path) -> Path:
    payload = {
        "dim": tables.dim,
        "slices": {},
        "central": {},
    }
    for sid in vocab.slices:
        rows = tables.member_rows[sid]
        composed = tables.central_in[rows] + tables.delta_in[sid][rows]
        payload["slices"][sid] = {
            word: [float(x) for x in vec]
            for word, vec in zip(vocab.slice_vocabs[sid].words, composed)
        }
    payload["central"] = {
        word: [float(x) for x in vec]
        for word, vec in zip(vocab.global_words, tables.central_in)
    }
    out = Path(path)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return out
