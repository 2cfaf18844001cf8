"""Feature classification by clustering symbol embeddings."""

from __future__ import annotations

import colorsys
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import EmbeddingModel
from .render import render_scatter
from .tsne import tsne
from .volume import SymbolVolume, VolumeError

NOISE = -1
NOISE_LABEL = 65535
MAX_REPULSION_ITERS = 500
METRICS = ("cosine", "euclidean")


def pairwise_distances(points: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Dense distance matrix.  Cosine distance treats zero vectors as orthogonal to all."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("points must be a 2D array")
    if metric == "cosine":
        norms = np.linalg.norm(X, axis=1)
        ok = norms > 0
        U = np.zeros_like(X)
        U[ok] = X[ok] / norms[ok, None]
        D = 1.0 - U @ U.T
        np.fill_diagonal(D, 0.0)
        return np.clip(D, 0.0, 2.0)
    if metric == "euclidean":
        diff = X[:, None, :] - X[None, :, :]
        return np.sqrt((diff * diff).sum(axis=-1))
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def dbscan(points, eps: float, min_pts: int, metric: str = "cosine",
           distances: np.ndarray | None = None) -> np.ndarray:
    """Density-based clustering; returns one label per point, noise is -1.

    A point's neighbourhood contains every point within ``eps`` (inclusive),
    itself included.  Clusters are grown breadth-first from core points
    taken in index order, so a border point reachable from several clusters
    joins the one with the smallest label.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    D = pairwise_distances(points, metric) if distances is None else np.asarray(distances)
    n = D.shape[0]
    neighbors = [np.flatnonzero(D[i] <= eps) for i in range(n)]
    core = np.array([nb.size >= min_pts for nb in neighbors], dtype=bool)
    labels = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            if not core[p]:
                continue
            for q in neighbors[p]:
                if labels[q] == NOISE:
                    labels[q] = cluster
                    queue.append(q)
        cluster += 1
    return labels


@dataclass
class Feature:
    id: int
    symbols: np.ndarray
    voxels: int
    mean: np.ndarray
    filtered: bool = False
    position: np.ndarray = field(default_factory=lambda: np.zeros(2))
    radius: float = 0.0


@dataclass
class FeatureSet:
    labels: np.ndarray  # per symbol, -1 for noise
    features: list[Feature]
    noise_voxels: int
    total_voxels: int
    # False when the disc layout hit the iteration cap with overlaps left
    layout_resolved: bool = True
    kl: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.features)

    @property
    def visible(self) -> list[Feature]:
        return [f for f in self.features if not f.filtered]


def classify_features(model: EmbeddingModel, sv: SymbolVolume, eps: float = 0.85,
                      min_pts: int = 4, min_voxels: int | None = None,
                      metric: str = "cosine", space: str = "embedding") -> FeatureSet:
    """Cluster symbols and group their voxels into features.

    ``space="raw"`` clusters the quantized level tuples instead of the
    embeddings (useful as a baseline; pair it with ``metric="euclidean"``).
    Features with fewer than ``min_voxels`` voxels (default 0.1% of the
    volume) are kept but flagged as filtered.
    """
    if model.size != sv.table.size:
        raise VolumeError("model and symbol volume use different symbol tables")
    if not np.any(model.Zhat):
        raise ValueError("model is untrained")
    if space == "embedding":
        points = model.Z
    elif space == "raw":
        points = sv.table.combos.astype(np.float64)
    else:
        raise ValueError(f"unknown space {space!r}")
    counts = sv.counts()
    T = sv.size
    if min_voxels is None:
        min_voxels = max(1, int(np.ceil(0.001 * T)))
    labels = dbscan(points, eps, min_pts, metric)
    features = []
    for fid in range(int(labels.max(initial=-1)) + 1):
        members = np.flatnonzero(labels == fid)
        w = counts[members].astype(np.float64)
        vox = int(w.sum())
        if vox > 0:
            mean = (w[:, None] * model.Z[members]).sum(axis=0) / vox
        else:
            mean = model.Z[members].mean(axis=0)
        features.append(Feature(fid, members, vox, mean, vox < min_voxels))
    noise = int(counts[labels == NOISE].sum())
    return FeatureSet(labels, features, noise, T)


def _separate_discs(pos: np.ndarray, radii: np.ndarray, max_iters: int) -> bool:
    """Push overlapping discs apart along their center line; True if all overlaps resolved."""
    n = len(pos)
    for it in range(max_iters):
        moved = False
        for i in range(n):
            for j in range(i + 1, n):
                delta = pos[j] - pos[i]
                dist = float(np.hypot(*delta))
                need = radii[i] + radii[j]
                if dist >= need:
                    continue
                if dist < 1e-12:
                    ang = 2.399963 * (i * n + j)  # golden-angle spread for coincident centers
                    direction = np.array([np.cos(ang), np.sin(ang)])
                else:
                    direction = delta / dist
                push = 0.5 * (need - dist) * (1.0 + 1e-6) + 1e-12
                pos[i] -= push * direction
                pos[j] += push * direction
                moved = True
        if not moved:
            return True
    return not _any_overlap(pos, radii)


def _any_overlap(pos: np.ndarray, radii: np.ndarray) -> bool:
    n = len(pos)
    for i in range(n):
        for j in range(i + 1, n):
            if np.hypot(*(pos[j] - pos[i])) < radii[i] + radii[j]:
                return True
    return False


def project_features(features: FeatureSet, seed: int = 0, iterations: int = 1000,
                     perplexity: float = 5.0, radius_scale: float = 0.1) -> FeatureSet:
    """Lay features out in 2D and size discs by voxel count.  Mutates and returns ``features``."""
    feats = features.features
    if not feats:
        raise ValueError("no features to project")
    if len(feats) == 1:
        pos = np.zeros((1, 2))
        features.kl = np.zeros(0)
    else:
        res = tsne(np.stack([f.mean for f in feats]), perplexity=perplexity,
                   iterations=iterations, seed=seed)
        pos = res.embedding.copy()
        features.kl = res.kl
    span = float(np.ptp(pos, axis=0).max()) if len(pos) > 1 else 0.0
    span = span if span > 0 else 1.0
    vox = np.array([f.voxels for f in feats], dtype=np.float64)
    top = vox.max() if vox.max() > 0 else 1.0
    radii = radius_scale * span * np.sqrt(vox / top)
    features.layout_resolved = _separate_discs(pos, radii, MAX_REPULSION_ITERS)
    for f, p, r in zip(feats, pos, radii):
        f.position = p.copy()
        f.radius = float(r)
    return features


def feature_color(fid: int) -> tuple[int, int, int]:
    h = (fid * 0.618033988749895) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.65, 0.9)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def label_volume(features: FeatureSet, sv: SymbolVolume) -> np.ndarray:
    """Per-voxel feature ids as uint16, noise mapped to 65535."""
    if len(features.features) >= NOISE_LABEL:
        raise ValueError("too many features for a 16-bit label volume")
    per_symbol = np.where(features.labels == NOISE, NOISE_LABEL, features.labels).astype(np.uint16)
    return per_symbol[sv.ids]


def export_label_volume(features: FeatureSet, sv: SymbolVolume, out_dir: str | Path,
                        stem: str = "features") -> tuple[Path, Path]:
    """Write ``<stem>.raw`` (uint16 little-endian, x fastest) and ``<stem>.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw_path, legend_path = out_dir / f"{stem}.raw", out_dir / f"{stem}.json"
    label_volume(features, sv).astype("<u2").tofile(raw_path)
    table = sv.table
    legend = {
        "dims": list(sv.dims),
        "dtype": "uint16",
        "byte_order": "little",
        "noise_label": NOISE_LABEL,
        "noise_voxels": features.noise_voxels,
        "features": {
            str(f.id): {
                "symbols": [table.label(int(s)) for s in f.symbols],
                "voxels": f.voxels,
                "position": [float(x) for x in f.position],
                "radius": f.radius,
                "filtered": bool(f.filtered),
                "color": list(feature_color(f.id)),
            }
            for f in features.features
        },
    }
    legend_path.write_text(json.dumps(legend, indent=2))
    return raw_path, legend_path


def read_label_volume(raw_path: str | Path, dims) -> np.ndarray:
    nx, ny, nz = dims
    return np.fromfile(raw_path, dtype="<u2").reshape(nz, ny, nx)


def render_features(features: FeatureSet, out_path: str | Path) -> Path:
    feats = features.features
    pos = np.stack([f.position for f in feats])
    radii = np.array([f.radius for f in feats])
    return render_scatter(pos, radii, out_path, labels=[str(f.id) for f in feats],
                          muted=[f.filtered for f in feats])
