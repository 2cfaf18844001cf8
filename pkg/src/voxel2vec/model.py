"""Embedding matrices and the skip-gram training loop."""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels as K
from .sampler import NegativeDistribution, TrainConfig, TrainingPair, epoch_order
from .volume import SymbolTable, SymbolVolume

log = logging.getLogger(__name__)

MAGIC = b"V2V1"
LOG_EVERY = 10_000


class DegenerateVocabularyWarning(UserWarning):
    pass


@dataclass
class TrainingLog:
    pairs_seen: int = 0
    # mean per-positive objective over consecutive blocks of LOG_EVERY pairs
    objective: list[float] = field(default_factory=list)


@dataclass
class EmbeddingModel:
    Z: np.ndarray
    Zhat: np.ndarray
    table: SymbolTable | None = None
    epochs_trained: int = 0
    degenerate: bool = False
    log: TrainingLog = field(default_factory=TrainingLog)

    @property
    def dim(self) -> int:
        return self.Z.shape[1]

    @property
    def size(self) -> int:
        return self.Z.shape[0]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.Z.copy(), self.Zhat.copy(), self.table, self.epochs_trained,
                              self.degenerate, TrainingLog(self.log.pairs_seen, list(self.log.objective)))


def init_model(n_symbols: int, dim: int, rng: np.random.Generator,
               table: SymbolTable | None = None) -> EmbeddingModel:
    if n_symbols < 1 or dim < 1:
        raise ValueError("need at least one symbol and one dimension")
    Z = rng.uniform(-0.5 / dim, 0.5 / dim, size=(n_symbols, dim))
    return EmbeddingModel(Z, np.zeros((n_symbols, dim)), table)


def train_step(model: EmbeddingModel, pair: TrainingPair,
               negatives: Sequence[Sequence[int]], cfg: TrainConfig) -> float:
    """Apply the update rule for every positive of ``pair`` in order.

    ``negatives[i]`` are the negatives drawn for ``pair.context[i]``.
    Returns the summed objective evaluated before each positive's update.
    """
    if len(negatives) != len(pair.context):
        raise ValueError("need one negative list per context symbol")
    lam = cfg.penalty if cfg.adaptive else 0.0
    e = np.empty(model.dim)
    total = 0.0
    for o, negs in zip(pair.context, negatives):
        negs = np.asarray(negs, dtype=np.int64)
        total += K.sgd_pair(model.Z, model.Zhat, int(pair.center), int(o), negs, negs.size,
                            cfg.learning_rate, lam, cfg.negatives, e)
    return total


def objective(model: EmbeddingModel, center: int, positive: int,
              negatives: Sequence[int], lam: float, k: int) -> float:
    """Penalized negative-sampling log-likelihood of one positive instance."""
    zc = model.Z[center]
    val = _log_sigmoid(model.Zhat[positive] @ zc)
    nc = np.linalg.norm(zc)
    if nc >= K.NORM_EPS:
        val -= lam * nc
    for w in negatives:
        zw = model.Zhat[w]
        val += _log_sigmoid(-(zw @ zc))
        nw = np.linalg.norm(zw)
        if nw >= K.NORM_EPS:
            val -= lam / (k + 1) * nw
    return float(val)


def _log_sigmoid(x: float) -> float:
    return -np.logaddexp(0.0, -x)


def train(sv: SymbolVolume, cfg: TrainConfig) -> EmbeddingModel:
    """Train embeddings for every symbol of ``sv.table`` on one volume.

    ``cfg.threads == 1`` is bit-reproducible for a fixed seed; more threads
    run lock-free shards and are not.
    """
    root = np.random.SeedSequence(cfg.seed)
    init_seq, *epoch_seqs = root.spawn(cfg.epochs + 1)
    n_sym = sv.table.size
    model = init_model(n_sym, cfg.dim, np.random.default_rng(init_seq), sv.table)
    counts = sv.counts()
    if np.count_nonzero(counts) < 2:
        warnings.warn("fewer than two distinct symbols; returning the initialized model",
                      DegenerateVocabularyWarning, stacklevel=2)
        model.degenerate = True
        return model
    dist = NegativeDistribution(counts)
    nx, ny, nz = sv.dims
    ids = np.ascontiguousarray(sv.ids.ravel(), dtype=np.int64)
    seen = 0
    sums, cnts = [], []
    for seq in epoch_seqs:
        rng = np.random.default_rng(seq)
        order = epoch_order(sv, cfg, rng).astype(np.int64)
        n_blocks = (seen + order.size * ((2 * cfg.window + 1) ** 3 - 1)) // LOG_EVERY + 1
        args = (cfg.window, cfg.negatives, cfg.learning_rate, cfg.penalty, cfg.adaptive,
                cfg.self_paced, cfg.batch_size, seen, cfg.pool_size, cfg.literal_max_threshold)
        if cfg.threads == 1:
            log_sum = np.zeros(n_blocks)
            log_cnt = np.zeros(n_blocks, dtype=np.int64)
            pairs = K.train_range(rng, ids, nx, ny, nz, order, 0, order.size, model.Z, model.Zhat,
                                 dist.prob, dist.alias, dist.weights, *args, log_sum, log_cnt, LOG_EVERY)
        else:
            shards = cfg.threads
            bounds = np.linspace(0, order.size, shards + 1).astype(np.int64)
            gens = tuple(np.random.default_rng(s) for s in seq.spawn(shards))
            log_sum = np.zeros((shards, n_blocks))
            log_cnt = np.zeros((shards, n_blocks), dtype=np.int64)
            pairs = K.train_shards(gens, ids, nx, ny, nz, order, bounds, model.Z, model.Zhat,
                                  dist.prob, dist.alias, dist.weights, *args, log_sum, log_cnt, LOG_EVERY)
            log_sum, log_cnt = log_sum.sum(axis=0), log_cnt.sum(axis=0)
        seen += int(pairs)
        sums.append(log_sum)
        cnts.append(log_cnt)
        model.epochs_trained += 1
    total_sum = np.zeros(max(len(s) for s in sums))
    total_cnt = np.zeros_like(total_sum)
    for s, c in zip(sums, cnts):
        total_sum[: len(s)] += s
        total_cnt[: len(c)] += c
    nz_mask = total_cnt > 0
    model.log = TrainingLog(seen, list(total_sum[nz_mask] / total_cnt[nz_mask]))
    if not (np.all(np.isfinite(model.Z)) and np.all(np.isfinite(model.Zhat))):
        raise FloatingPointError("training produced non-finite embeddings")
    log.debug("trained %d symbols on %d pairs", n_sym, seen)
    return model


def score_matrix(model: EmbeddingModel, scoring: str = "printed") -> np.ndarray:
    """``S[s, o]``: score of candidate ``s`` given context symbol ``o``.

    ``"printed"`` uses ``sigmoid(zhat_s . z_o)``; ``"swapped"`` uses
    ``sigmoid(z_s . zhat_o)``.
    """
    if scoring == "printed":
        raw = model.Zhat @ model.Z.T
    elif scoring == "swapped":
        raw = model.Z @ model.Zhat.T
    else:
        raise ValueError(f"unknown scoring {scoring!r}")
    return np.ascontiguousarray(0.5 * (1.0 + np.tanh(0.5 * raw)))


def predict_distribution(model: EmbeddingModel, context, scoring: str = "printed") -> np.ndarray:
    """Average context-conditioned scores over all symbols (not normalized)."""
    ctx = np.asarray(context, dtype=np.int64).ravel()
    if ctx.size == 0:
        raise ValueError("context must not be empty")
    S = score_matrix(model, scoring)
    out = np.empty(model.size)
    K.context_scores(S, ctx, ctx.size, np.zeros(model.size, dtype=np.int64),
                     np.empty(ctx.size, dtype=np.int64), out)
    return out


def predict_symbol(model: EmbeddingModel, context, scoring: str = "printed") -> int:
    """Argmax of :func:`predict_distribution`, ties to the lowest id."""
    return int(K.argmax_lowest(predict_distribution(model, context, scoring)))


def save_embedding(model: EmbeddingModel, path: str | Path) -> None:
    """Binary layout: magic, |C| u64, d u32, N u32, combos (u32), Z, Zhat (f32), LE."""
    if model.table is None:
        raise ValueError("model has no symbol table to save")
    combos = model.table.combos
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QII", model.size, model.dim, combos.shape[1]))
        fh.write(combos.astype("<u4").tobytes())
        fh.write(model.Z.astype("<f4").tobytes())
        fh.write(model.Zhat.astype("<f4").tobytes())


def load_embedding(path: str | Path, R: int = 0) -> EmbeddingModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not an embedding file")
    n, d, arity = struct.unpack_from("<QII", raw, 4)
    off = 4 + 16
    combos = np.frombuffer(raw, "<u4", n * arity, off).reshape(n, arity).astype(np.int64)
    off += 4 * n * arity
    Z = np.frombuffer(raw, "<f4", n * d, off).reshape(n, d).astype(np.float64)
    off += 4 * n * d
    Zhat = np.frombuffer(raw, "<f4", n * d, off).reshape(n, d).astype(np.float64)
    if off + 4 * n * d != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    table = SymbolTable(combos, R, np.zeros(n, dtype=np.int64))
    return EmbeddingModel(Z, Zhat, table)


def export_embedding_csv(model: EmbeddingModel, path: str | Path) -> None:
    d = model.dim
    header = ["symbol"] + [f"z{i}" for i in range(d)] + [f"zhat{i}" for i in range(d)]
    labels = model.table.labels() if model.table is not None else [str(i) for i in range(model.size)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for lab, z, zh in zip(labels, model.Z, model.Zhat):
            fh.write(lab + "," + ",".join(f"{x:.6g}" for x in np.concatenate([z, zh])) + "\n")
