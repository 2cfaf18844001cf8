"""Clamped cosine similarity between center vectors."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import EmbeddingModel
from .render import render_heatmap
from .volume import SymbolTable

__all__ = ["SimilarityMap", "similarity", "similarity_map", "render_heatmap", "export_csv"]

ZERO_NORM = 1e-12


@dataclass
class SimilarityMap:
    values: np.ndarray
    table: SymbolTable | None = None
    # symbols whose center vector has zero norm (never trained as a center)
    flagged: tuple[int, ...] = ()

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def shape(self):
        return self.values.shape


def similarity(model: EmbeddingModel, x: int, y: int) -> float:
    """``max(cos(z_x, z_y), 0)``; 0 when either vector is zero."""
    zx, zy = model.Z[x], model.Z[y]
    nx, ny = np.linalg.norm(zx), np.linalg.norm(zy)
    if nx < ZERO_NORM or ny < ZERO_NORM:
        return 0.0
    return float(min(max(zx @ zy / (nx * ny), 0.0), 1.0))


def similarity_map(model: EmbeddingModel) -> SimilarityMap:
    Z = model.Z
    norms = np.linalg.norm(Z, axis=1)
    ok = norms >= ZERO_NORM
    U = np.zeros_like(Z)
    U[ok] = Z[ok] / norms[ok, None]
    S = U @ U.T
    S = np.clip(0.5 * (S + S.T), 0.0, 1.0)
    idx = np.flatnonzero(ok)
    S[idx, idx] = 1.0
    return SimilarityMap(S, model.table, tuple(int(i) for i in np.flatnonzero(~ok)))


def export_csv(smap: SimilarityMap, path: str | Path) -> Path:
    """Header of symbol labels, then one row of 6-significant-digit floats per symbol."""
    n = smap.values.shape[0]
    labels = smap.table.labels() if smap.table is not None else [str(i) for i in range(n)]
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(",".join(labels) + "\n")
        for row in smap.values:
            fh.write(",".join(f"{v:.6g}" for v in row) + "\n")
    return path


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        labels = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return labels, np.array(rows)
