"""Training-pair streams and negative sampling."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Sequence

import numpy as np

from . import _kernels as K
from .volume import SymbolVolume, VolumeError


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    window: int = 1
    negatives: int = 3
    dim: int = 30
    learning_rate: float = 0.05
    penalty: float = 0.005
    R: int = 256
    batch_size: int = 1000
    epochs: int = 1
    seed: int = 0
    subsample: float = 1e-3
    min_samples_per_symbol: int = 8
    # exclusion of {center} + context from negatives, and the norm penalty
    adaptive: bool = True
    # threshold filtering and informativeness re-weighting of negatives
    self_paced: bool = True
    pool_factor: int = 8
    literal_max_threshold: bool = False
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.window >= 1, "window must be >= 1"),
            (self.negatives >= 1, "negatives must be >= 1"),
            (self.dim >= 1, "dim must be >= 1"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (self.penalty >= 0, "penalty must be >= 0"),
            (self.R >= 1, "R must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (0 < self.subsample <= 1, "subsample must be in (0, 1]"),
            (self.min_samples_per_symbol >= 0, "min_samples_per_symbol must be >= 0"),
            (self.pool_factor >= 1, "pool_factor must be >= 1"),
            (self.threads >= 1, "threads must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def pool_size(self) -> int:
        return self.pool_factor * self.negatives

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


class NegativeDistribution:
    """Unigram counts raised to 3/4, normalized, with an alias table for O(1) draws."""

    def __init__(self, counts: np.ndarray, power: float = 0.75):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.ndim != 1 or counts.size == 0 or np.any(counts < 0):
            raise ValueError("counts must be a non-empty vector of non-negative numbers")
        w = counts**power
        total = w.sum()
        if total <= 0:
            raise ValueError("at least one symbol needs a positive count")
        self.weights = w / total
        self.prob, self.alias = _alias_table(self.weights)

    def __len__(self) -> int:
        return self.weights.size

    def restricted(self, excluded) -> np.ndarray:
        """The law renormalized after zeroing ``excluded`` symbols."""
        p = self.weights.copy()
        p[list(excluded)] = 0.0
        s = p.sum()
        return p / s if s > 0 else p


def _alias_table(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vose's alias method: O(1) draws with one uniform per sample."""
    n = p.size
    scaled = p * n
    prob = np.ones(n)
    alias = np.arange(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s, g = small.pop(), large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] -= 1.0 - scaled[s]
        (small if scaled[g] < 1.0 else large).append(g)
    # leftovers are 1 up to rounding
    return prob, alias


@dataclass
class SelfPacedState:
    batch_size: int = 1000
    eta: int = 1
    literal_max: bool = False

    @property
    def threshold(self) -> float:
        return threshold(self)

    @property
    def filtering(self) -> bool:
        """Threshold filtering is suspended until the threshold passes 0.5."""
        return self.threshold > 0.5

    def advance(self) -> None:
        self.eta += 1


def threshold(state: SelfPacedState) -> float:
    if state.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    return float(K.threshold(float(state.eta), float(state.batch_size), state.literal_max))


@dataclass(frozen=True)
class TrainingPair:
    center: int
    context: np.ndarray
    voxel: int = -1


def context_of(sv: SymbolVolume, voxel: Sequence[int], n: int) -> np.ndarray:
    """Symbols of in-bounds voxels within Chebyshev radius ``n``, center excluded."""
    nx, ny, nz = sv.dims
    i, j, k = (int(a) for a in voxel)
    if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
        raise VolumeError(f"voxel {voxel} is outside dims {sv.dims}")
    if n < 1:
        raise ConfigError("window must be >= 1")
    out = np.empty((2 * n + 1) ** 3, dtype=np.int64)
    m = K.gather_context(sv.ids.ravel(), nx, ny, nz, i + nx * (j + ny * k), n, out)
    return out[:m].copy()


def keep_probabilities(counts: np.ndarray, total: int, rho: float) -> np.ndarray:
    """Frequent-symbol subsampling: ``min(1, sqrt(rho * T / freq))`` per symbol."""
    counts = np.asarray(counts, dtype=np.float64)
    with np.errstate(divide="ignore"):
        p = np.sqrt(rho * total / counts)
    return np.minimum(p, 1.0)


def epoch_order(sv: SymbolVolume, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Flat voxel indices visited in one epoch.

    Voxels are visited in a random permutation and subsampled by center
    symbol; symbols that end up with fewer than
    ``cfg.min_samples_per_symbol`` centers get extra voxels (repeating if
    the symbol is rarer than the floor).  The result is shuffled again so
    the extras are spread through the epoch.
    """
    ids = sv.ids.ravel()
    T = ids.size
    counts = sv.counts()
    perm = rng.permutation(T)
    keep_p = keep_probabilities(counts, T, cfg.subsample)
    keep = rng.random(T) < keep_p[ids[perm]]
    kept = perm[keep]
    floor = cfg.min_samples_per_symbol
    kept_counts = np.bincount(ids[kept], minlength=counts.size)
    short = np.flatnonzero((counts > 0) & (kept_counts < floor))
    if short.size == 0:
        return kept
    by_symbol = np.argsort(ids[perm], kind="stable")
    starts = np.searchsorted(ids[perm][by_symbol], np.arange(counts.size + 1))
    extras = []
    for s in short:
        group = by_symbol[starts[s]:starts[s + 1]]
        unkept = perm[group[~keep[group]]]
        need = floor - kept_counts[s]
        if unkept.size >= need:
            extras.append(unkept[:need])
        else:
            everyone = perm[group]
            reps = -(-(need - unkept.size) // everyone.size)
            extras.append(np.concatenate([unkept, np.tile(everyone, reps)[: need - unkept.size]]))
    order = np.concatenate([kept] + extras)
    return order[rng.permutation(order.size)]


def voxel_stream(sv: SymbolVolume, cfg: TrainConfig, rng: np.random.Generator) -> Iterator[TrainingPair]:
    nx, ny, nz = sv.dims
    ids = sv.ids.ravel()
    buf = np.empty((2 * cfg.window + 1) ** 3, dtype=np.int64)
    for v in epoch_order(sv, cfg, rng):
        m = K.gather_context(ids, nx, ny, nz, int(v), cfg.window, buf)
        if m:
            yield TrainingPair(int(ids[v]), buf[:m].copy(), int(v))


def draw_negatives(
    center: int,
    context,
    k: int,
    model,
    dist: NegativeDistribution,
    state: SelfPacedState | None,
    rng: np.random.Generator,
    *,
    adaptive: bool = True,
    self_paced: bool = True,
    pool_factor: int = 8,
    positive: int | None = None,
) -> np.ndarray:
    """Draw ``k`` negatives for one (center, context) instance.

    Returns an empty array when no symbol is eligible (the vocabulary is
    exhausted by the exclusions) or when self-paced filtering rejects the
    whole candidate pool.  ``positive`` is the context symbol skipped when
    ``adaptive`` is off.
    """
    context = np.asarray(context, dtype=np.int64)
    n_sym = len(dist)
    stamp = np.full(n_sym, -1, dtype=np.int64)
    w = dist.weights
    n_pos = int(np.count_nonzero(w > 0))
    if adaptive:
        excl = np.unique(np.concatenate([[center], context]))
        stamp[excl] = 0
        mark, skip = 0, -1
        elig_mass = 1.0 - float(w[excl].sum())
        n_elig = n_pos - int(np.count_nonzero(w[excl] > 0))
    else:
        mark = K.NO_MARK
        skip = int(positive if positive is not None else -1)
        wo = float(w[skip]) if skip >= 0 else 0.0
        elig_mass = 1.0 - wo
        n_elig = n_pos - (1 if wo > 0 else 0)
    if state is None:
        state = SelfPacedState()
    thr = state.threshold
    use_pool = self_paced and thr > 0.5
    pool_m = pool_factor * k
    out = np.empty(k, dtype=np.int64)
    pool_w = np.empty(pool_m, dtype=np.int64)
    pool_s = np.empty(pool_m, dtype=np.float64)
    r = K.draw_negatives(rng, model.Z[center], model.Zhat, dist.prob, dist.alias, w, stamp, mark, skip,
                         elig_mass, n_elig, k, pool_m, use_pool, thr, out, pool_w, pool_s)
    return out[:r].copy()
