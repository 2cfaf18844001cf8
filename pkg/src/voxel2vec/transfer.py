"""Association between volumes through transfer prediction."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels as K
from .model import EmbeddingModel, score_matrix, train
from .render import render_heatmap, render_heatmap_grid, render_scatter
from .sampler import TrainConfig
from .tsne import TSNEResult, tsne
from .volume import SymbolTable, SymbolVolume, VolumeError


@dataclass
class VolumeCollection:
    volumes: list[SymbolVolume]
    labels: list[str]
    models: list[EmbeddingModel | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.volumes:
            raise VolumeError("empty collection")
        if len(self.labels) != len(self.volumes):
            raise VolumeError("need one label per member")
        table, dims = self.volumes[0].table, self.volumes[0].dims
        for v in self.volumes[1:]:
            if v.table is not table:
                raise VolumeError("collection members must share one symbol table")
            if v.dims != dims:
                raise VolumeError("collection members must share dims")
        if not self.models:
            self.models = [None] * len(self.volumes)
        elif len(self.models) != len(self.volumes):
            raise VolumeError("need one model slot per member")

    def __len__(self) -> int:
        return len(self.volumes)

    @property
    def table(self) -> SymbolTable:
        return self.volumes[0].table

    def train_all(self, cfg: TrainConfig) -> "VolumeCollection":
        """Train every member with ``cfg``; member ``m`` gets its own seed derived from ``cfg.seed``."""
        seeds = np.random.SeedSequence(cfg.seed).generate_state(len(self), dtype=np.uint32)
        for m, sv in enumerate(self.volumes):
            self.models[m] = train(sv, dataclasses.replace(cfg, seed=int(seeds[m])))
        return self


@dataclass
class AssociationMatrix:
    values: np.ndarray
    labels: list[str]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def transfer_predict(model: EmbeddingModel, volume: SymbolVolume, n: int = 1,
                     scoring: str = "printed", scores: np.ndarray | None = None) -> SymbolVolume:
    """Predict every voxel of ``volume`` from its neighbours using ``model``.

    ``scores`` may carry a precomputed :func:`score_matrix` to avoid
    recomputing it across calls.
    """
    if model.size != volume.table.size:
        raise VolumeError("model and volume use different symbol tables")
    if volume.size < 2:
        raise VolumeError("cannot predict a single-voxel volume")
    if n < 1:
        raise ValueError("window must be >= 1")
    S = score_matrix(model, scoring) if scores is None else scores
    nx, ny, nz = volume.dims
    ids = np.ascontiguousarray(volume.ids.ravel(), dtype=np.int64)
    pred = K.predict_volume(ids, nx, ny, nz, n, S)
    return SymbolVolume(volume.dims, pred.reshape(volume.ids.shape), volume.table)


def prediction_similarity(a: SymbolVolume, b: SymbolVolume) -> float:
    """Fraction of voxels whose symbols agree."""
    if a.dims != b.dims:
        raise VolumeError(f"dimension mismatch: {a.dims} vs {b.dims}")
    return float(np.count_nonzero(a.ids == b.ids)) / a.size


def _require_models(coll: VolumeCollection, members: Sequence[int]) -> None:
    for m in members:
        if coll.models[m] is None:
            raise ValueError(f"member {m} ({coll.labels[m]}) has no trained model")


def association(coll: VolumeCollection, i: int, j: int, n: int = 1,
                scoring: str = "printed") -> float:
    """Mean of the two cross-prediction accuracies; ``i == j`` gives self-association."""
    _require_models(coll, (i, j))
    s_ij = prediction_similarity(coll.volumes[i], transfer_predict(coll.models[j], coll.volumes[i], n, scoring))
    if i == j:
        return s_ij
    s_ji = prediction_similarity(coll.volumes[j], transfer_predict(coll.models[i], coll.volumes[j], n, scoring))
    return 0.5 * (s_ij + s_ji)


def accuracy_table(coll: VolumeCollection, n: int = 1, scoring: str = "printed") -> np.ndarray:
    """``acc[i, j]``: accuracy of predicting member ``i`` with member ``j``'s model."""
    _require_models(coll, range(len(coll)))
    S = [score_matrix(m, scoring) for m in coll.models]
    M = len(coll)
    acc = np.empty((M, M))
    for i in range(M):
        for j in range(M):
            pred = transfer_predict(coll.models[j], coll.volumes[i], n, scores=S[j])
            acc[i, j] = prediction_similarity(coll.volumes[i], pred)
    return acc


def association_matrix(coll: VolumeCollection, n: int = 1, scoring: str = "printed") -> AssociationMatrix:
    acc = accuracy_table(coll, n, scoring)
    ass = 0.5 * (acc + acc.T)
    np.fill_diagonal(ass, np.diag(acc))
    return AssociationMatrix(ass, list(coll.labels))


def ensemble_projection(assoc: AssociationMatrix, seed: int = 0, iterations: int = 1000,
                        perplexity: float = 5.0) -> TSNEResult:
    """2D layout using ``1 - ass`` as the distance between members."""
    A = np.asarray(assoc.values, dtype=np.float64)
    if A.shape[0] < 2:
        raise ValueError("need at least two members to project")
    D = np.clip(1.0 - A, 0.0, None)
    np.fill_diagonal(D, 0.0)
    return tsne(distances=D, perplexity=perplexity, iterations=iterations, seed=seed)


def export_association_csv(assoc: AssociationMatrix, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("member," + ",".join(assoc.labels) + "\n")
        for lab, row in zip(assoc.labels, assoc.values):
            fh.write(lab + "," + ",".join(f"{v:.6g}" for v in row) + "\n")
    return path


def read_association_csv(path: str | Path) -> AssociationMatrix:
    with open(path) as fh:
        labels = fh.readline().strip().split(",")[1:]
        rows = [[float(v) for v in line.strip().split(",")[1:]] for line in fh if line.strip()]
    return AssociationMatrix(np.array(rows), labels)


def export_prediction(pred: SymbolVolume, path: str | Path) -> Path:
    """Raw uint32 symbol grid, little-endian, x fastest."""
    path = Path(path)
    pred.ids.astype("<u4").tofile(path)
    return path


def render_association(assoc: AssociationMatrix, out_path, value_range=(0.7, 1.0), scale: int = 16) -> Path:
    return render_heatmap(assoc.values, out_path, value_range, scale)


def render_association_grid(mats: Sequence[AssociationMatrix], out_path, value_range=(0.7, 1.0)) -> Path:
    return render_heatmap_grid([m.values for m in mats], out_path, value_range)


def render_projection(layout: np.ndarray, labels: Sequence[str], out_path) -> Path:
    return render_scatter(layout, None, out_path, labels=labels)
