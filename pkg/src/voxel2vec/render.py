"""PNG output: heatmaps, heatmap grids and feature scatters."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

LIGHT = np.array([222, 235, 247], dtype=np.float64)
DARK = np.array([8, 48, 107], dtype=np.float64)
GRAY = (170, 170, 170)


def ramp(values: np.ndarray, value_range: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Linear light-blue to dark-blue colours, uint8 RGB, values clipped to the range."""
    lo, hi = value_range
    if hi <= lo:
        raise ValueError(f"empty value range {value_range}")
    t = np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    rgb = LIGHT + t[..., None] * (DARK - LIGHT)
    return np.rint(rgb).astype(np.uint8)


def render_heatmap(matrix, out_path, value_range=(0.0, 1.0), scale: int = 1) -> Path:
    """One pixel per cell (``scale`` > 1 upsamples nearest-neighbour); row 0 at top."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("matrix must be a non-empty 2D array")
    img = ramp(m, value_range)
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    out_path = Path(out_path)
    Image.fromarray(img, "RGB").save(out_path)
    return out_path


def render_heatmap_grid(matrices: Sequence[np.ndarray], out_path, value_range=(0.7, 1.0),
                        cell: int = 24, cols: int | None = None, gap: int = 4) -> Path:
    """Small multiples of equally sized heatmaps, left to right then down."""
    if not matrices:
        raise ValueError("no matrices to draw")
    n = len(matrices)
    cols = cols or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    h, w = np.asarray(matrices[0]).shape
    tile_h, tile_w = h * cell, w * cell
    canvas = np.full((rows * (tile_h + gap) + gap, cols * (tile_w + gap) + gap, 3), 255, np.uint8)
    for i, m in enumerate(matrices):
        r, c = divmod(i, cols)
        tile = ramp(np.asarray(m), value_range).repeat(cell, axis=0).repeat(cell, axis=1)
        y0, x0 = gap + r * (tile_h + gap), gap + c * (tile_w + gap)
        canvas[y0:y0 + tile_h, x0:x0 + tile_w] = tile
    out_path = Path(out_path)
    Image.fromarray(canvas, "RGB").save(out_path)
    return out_path


def render_scatter(positions: np.ndarray, radii: np.ndarray | None, out_path,
                   labels: Sequence[str] | None = None, muted: Sequence[bool] | None = None,
                   size: int = 640, margin: int = 40) -> Path:
    """Discs at 2D positions; muted entries are drawn gray."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    n = len(pos)
    radii = np.full(n, 0.0) if radii is None else np.asarray(radii, dtype=np.float64)
    muted = [False] * n if muted is None else list(muted)
    lo = (pos - radii[:, None]).min(axis=0) if n else np.zeros(2)
    hi = (pos + radii[:, None]).max(axis=0) if n else np.ones(2)
    span = float(max((hi - lo).max(), 1e-12))
    s = (size - 2 * margin) / span
    img = Image.new("RGB", (size, size), "white")
    draw = ImageDraw.Draw(img)
    blue = tuple(int(x) for x in ramp(np.array(0.75)))
    for i in range(n):
        cx, cy = margin + (pos[i] - lo) * s
        r = max(radii[i] * s, 3.0)
        fill = GRAY if muted[i] else blue
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill, outline=(40, 40, 40))
        if labels is not None:
            draw.text((cx + r + 2, cy - 6), str(labels[i]), fill=(0, 0, 0))
    out_path = Path(out_path)
    img.save(out_path)
    return out_path
