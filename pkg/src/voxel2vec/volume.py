"""Volumes, quantization, symbolization and the ABC-flow generator.

Arrays are stored with shape ``(nz, ny, nx)`` so that a C-order flatten is
x-fastest, matching headerless raw files on disk.  ``dims`` is always the
``(nx, ny, nz)`` triple.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "uint8": np.uint8,
    "uint16": np.uint16,
}


class VolumeError(ValueError):
    """Bad parameters or inconsistent volume data."""


class DescriptorError(VolumeError):
    """Descriptor does not match the data on disk."""


def _check_dims(dims: Sequence[int]) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) <= 0:
        raise VolumeError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass
class VolumeDescriptor:
    dims: tuple[int, int, int]
    dtype: str = "float32"
    byte_order: str = "little"
    variables: dict[str, str] = field(default_factory=dict)
    time_step: float | None = None
    ensemble_params: dict[str, float] | None = None
    time_steps: list["VolumeDescriptor"] = field(default_factory=list)
    ensemble: dict[str, "VolumeDescriptor"] = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        if self.dtype not in DTYPES:
            raise DescriptorError(f"unsupported dtype {self.dtype!r}")
        if self.byte_order not in ("little", "big"):
            raise DescriptorError(f"byte_order must be little or big, got {self.byte_order!r}")

    @property
    def numpy_dtype(self) -> np.dtype:
        dt = np.dtype(DTYPES[self.dtype])
        return dt.newbyteorder("<" if self.byte_order == "little" else ">")

    def path_of(self, variable: str) -> Path:
        if variable not in self.variables:
            raise DescriptorError(
                f"unknown variable {variable!r}; available: {sorted(self.variables)}"
            )
        p = Path(self.variables[variable])
        return p if p.is_absolute() else self.base_dir / p

    def members(self) -> list[tuple[str, "VolumeDescriptor"]]:
        """Flatten a collection descriptor into (label, descriptor) pairs."""
        if self.time_steps:
            return [(_time_label(d, i), d) for i, d in enumerate(self.time_steps)]
        if self.ensemble:
            return list(self.ensemble.items())
        return [("0", self)]

    def to_dict(self) -> dict:
        out: dict = {
            "dims": list(self.dims),
            "dtype": self.dtype,
            "byte_order": self.byte_order,
            "variables": dict(self.variables),
        }
        if self.time_step is not None:
            out["time_step"] = self.time_step
        if self.ensemble_params is not None:
            out["ensemble_params"] = dict(self.ensemble_params)
        if self.time_steps:
            out["time_steps"] = [d.to_dict() for d in self.time_steps]
        if self.ensemble:
            out["ensemble"] = {k: d.to_dict() for k, d in self.ensemble.items()}
        return out

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | str = ".") -> "VolumeDescriptor":
        try:
            dims = doc["dims"]
        except KeyError:
            raise DescriptorError("descriptor is missing 'dims'") from None
        base_dir = Path(base_dir)
        kids = [cls.from_dict({**_inherit(doc), **d}, base_dir) for d in doc.get("time_steps", [])]
        ens = {
            k: cls.from_dict({**_inherit(doc), **d}, base_dir)
            for k, d in doc.get("ensemble", {}).items()
        }
        return cls(
            dims=dims,
            dtype=doc.get("dtype", "float32"),
            byte_order=doc.get("byte_order", "little"),
            variables=dict(doc.get("variables", {})),
            time_step=doc.get("time_step"),
            ensemble_params=doc.get("ensemble_params"),
            time_steps=kids,
            ensemble=ens,
            base_dir=base_dir,
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "VolumeDescriptor":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise OSError(f"cannot read descriptor {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DescriptorError(f"descriptor {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc, path.parent)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _inherit(doc: dict) -> dict:
    return {k: doc[k] for k in ("dims", "dtype", "byte_order") if k in doc}


def _time_label(d: VolumeDescriptor, i: int) -> str:
    if d.time_step is None:
        return str(i)
    t = d.time_step
    return str(int(t)) if float(t).is_integer() else str(t)


@dataclass(frozen=True)
class Volume:
    dims: tuple[int, int, int]
    data: np.ndarray  # (nz, ny, nx) float64
    min: float
    max: float

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Volume":
        """Wrap an ``(nz, ny, nx)`` array (2D/1D arrays get leading unit axes)."""
        arr = np.asarray(arr, dtype=np.float64)
        while arr.ndim < 3:
            arr = arr[np.newaxis]
        if arr.ndim != 3 or arr.size == 0:
            raise VolumeError(f"expected a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("volume contains NaN or Inf")
        nz, ny, nx = arr.shape
        return cls((nx, ny, nz), arr, float(arr.min()), float(arr.max()))

    @property
    def size(self) -> int:
        return self.data.size


def load_raw_volume(descriptor: VolumeDescriptor, variable: str) -> Volume:
    path = descriptor.path_of(variable)
    nx, ny, nz = descriptor.dims
    dt = descriptor.numpy_dtype
    expected = nx * ny * nz * dt.itemsize
    try:
        actual = path.stat().st_size
    except OSError as exc:
        raise OSError(f"cannot read raw volume {path}: {exc}") from exc
    if actual != expected:
        raise DescriptorError(
            f"{path}: file has {actual} bytes, dims {descriptor.dims} x {dt.itemsize} "
            f"bytes need {expected}"
        )
    raw = np.fromfile(path, dtype=dt)
    return Volume.from_array(raw.astype(np.float64).reshape(nz, ny, nx))


def write_raw_volume(data: np.ndarray, path: str | os.PathLike, dtype: str = "float32",
                     byte_order: str = "little") -> None:
    dt = np.dtype(DTYPES[dtype]).newbyteorder("<" if byte_order == "little" else ">")
    np.ascontiguousarray(data).astype(dt).tofile(path)


@dataclass(frozen=True)
class QuantizedVolume:
    dims: tuple[int, int, int]
    levels: np.ndarray  # (nz, ny, nx) int64
    R: int


def quantize(v: Volume, R: int, bounds: tuple[float, float] | None = None) -> QuantizedVolume:
    """Linear min-max binning into ``R`` levels, top value clamped to ``R - 1``.

    ``bounds`` overrides the volume's own extrema; collections pass global
    bounds so that levels are comparable across members.
    """
    if R <= 0:
        raise VolumeError(f"R must be positive, got {R}")
    lo, hi = bounds if bounds is not None else (v.min, v.max)
    if hi < lo:
        raise VolumeError(f"bounds ({lo}, {hi}) are inverted")
    if hi == lo:
        return QuantizedVolume(v.dims, np.zeros(v.data.shape, dtype=np.int64), R)
    if R < 2:
        raise VolumeError("R must be at least 2 for a non-constant volume")
    scaled = np.floor((v.data - lo) / (hi - lo) * R)
    levels = np.clip(scaled, 0, R - 1).astype(np.int64)
    return QuantizedVolume(v.dims, levels, R)


def global_bounds(volumes: Sequence[Volume]) -> tuple[float, float]:
    return min(v.min for v in volumes), max(v.max for v in volumes)


class SymbolTable:
    """Dense ids for the scalar-value combinations that actually occur."""

    def __init__(self, combos: np.ndarray, R: int, frequencies: np.ndarray):
        combos = np.asarray(combos, dtype=np.int64)
        if combos.ndim == 1:
            combos = combos[:, None]
        self.combos = combos
        self.R = int(R)
        self.frequencies = np.asarray(frequencies, dtype=np.int64)
        self._index: dict[tuple[int, ...], int] | None = None

    @property
    def arity(self) -> int:
        return self.combos.shape[1]

    @property
    def size(self) -> int:
        return self.combos.shape[0]

    def __len__(self) -> int:
        return self.size

    @property
    def total(self) -> int:
        return int(self.frequencies.sum())

    def lookup(self, combo: Sequence[int]) -> int:
        if self._index is None:
            self._index = {tuple(int(x) for x in row): i for i, row in enumerate(self.combos)}
        return self._index[tuple(int(x) for x in combo)]

    def label(self, symbol: int) -> str:
        return "_".join(str(int(x)) for x in self.combos[symbol])

    def labels(self) -> list[str]:
        return [self.label(i) for i in range(self.size)]

    def encode(self, quantized: Sequence[QuantizedVolume]) -> "SymbolVolume":
        """Map volumes onto this table; unseen combinations raise."""
        keys, dims = _combination_keys(quantized, self.R)
        table_keys = _pack(self.combos, self.R)
        order = np.argsort(table_keys, kind="stable")
        sorted_keys = table_keys[order]
        pos = np.searchsorted(sorted_keys, keys)
        pos = np.clip(pos, 0, len(sorted_keys) - 1)
        if not np.array_equal(sorted_keys[pos], keys):
            raise VolumeError("volume contains scalar-value combinations absent from the table")
        ids = order[pos].astype(np.int32)
        return SymbolVolume(dims, ids.reshape(dims[2], dims[1], dims[0]), self)


def _pack(levels: np.ndarray, R: int) -> np.ndarray:
    """Pack level tuples (rows) into single comparable keys."""
    n = levels.shape[1]
    if n * math.log2(max(R, 2)) < 63:
        key = np.zeros(levels.shape[0], dtype=np.int64)
        for i in range(n - 1, -1, -1):
            key = key * R + levels[:, i]
        return key
    # Too wide for an int64: a structured view compares rows lexicographically.
    rows = np.ascontiguousarray(levels, dtype=np.int64)
    return rows.view(np.dtype([(f"f{i}", np.int64) for i in range(n)])).ravel()


def _combination_keys(quantized: Sequence[QuantizedVolume], R: int):
    if not quantized:
        raise VolumeError("need at least one quantized volume")
    dims = quantized[0].dims
    for q in quantized:
        if q.dims != dims:
            raise VolumeError(f"dimension mismatch: {q.dims} vs {dims}")
        if q.R != R:
            raise VolumeError("all variables must share the quantization level R")
    levels = np.stack([q.levels.ravel() for q in quantized], axis=1)
    return _pack(levels, R), dims


@dataclass(frozen=True)
class SymbolVolume:
    dims: tuple[int, int, int]
    ids: np.ndarray  # (nz, ny, nx) int32
    table: SymbolTable

    @property
    def size(self) -> int:
        return self.ids.size

    def counts(self) -> np.ndarray:
        """Per-symbol voxel counts in this volume (length ``|C|``)."""
        return np.bincount(self.ids.ravel(), minlength=self.table.size).astype(np.int64)

    def levels(self) -> np.ndarray:
        """Per-voxel level tuples, shape ``(nz, ny, nx, N)``."""
        return self.table.combos[self.ids]


def symbolize(quantized: Sequence[QuantizedVolume]) -> tuple[SymbolTable, SymbolVolume]:
    """Assign dense symbol ids in first-occurrence (x-fastest scan) order."""
    R = quantized[0].R if quantized else 0
    keys, dims = _combination_keys(quantized, R)
    _, first, inverse, counts = np.unique(
        keys, return_index=True, return_inverse=True, return_counts=True
    )
    # np.unique sorts by key; renumber by first occurrence.
    rank = np.empty(len(first), dtype=np.int64)
    by_first = np.argsort(first, kind="stable")
    rank[by_first] = np.arange(len(first))
    ids = rank[inverse.ravel()].astype(np.int32)
    levels = np.stack([q.levels.ravel() for q in quantized], axis=1)
    combos = levels[first[by_first]]
    table = SymbolTable(combos, R, counts[by_first])
    return table, SymbolVolume(dims, ids.reshape(dims[2], dims[1], dims[0]), table)


def symbolize_collection(
    members: Sequence[Sequence[Volume]], R: int
) -> tuple[SymbolTable, list[SymbolVolume]]:
    """Quantize with bounds global to the collection and share one table.

    ``members[m][v]`` is variable ``v`` of member ``m``.  Table frequencies
    are summed over the collection; use :meth:`SymbolVolume.counts` for a
    single member.
    """
    if not members:
        raise VolumeError("empty collection")
    nvar = len(members[0])
    if any(len(m) != nvar for m in members):
        raise VolumeError("every member needs the same variables")
    bounds = [global_bounds([m[v] for m in members]) for v in range(nvar)]
    quantized = [[quantize(m[v], R, bounds[v]) for v in range(nvar)] for m in members]
    dims = quantized[0][0].dims
    stacked = []
    for qs in quantized:
        if qs[0].dims != dims:
            raise VolumeError("all collection members must share dims")
        stacked.append(np.stack([q.levels for q in qs], axis=-1))
    # Symbolize the concatenation along z so ids follow member order.
    big = np.concatenate(stacked, axis=0)
    nz = big.shape[0]
    joined = [QuantizedVolume((dims[0], dims[1], nz), big[..., v], R) for v in range(nvar)]
    table, sv = symbolize(joined)
    ids = sv.ids.reshape(len(members), dims[2], dims[1], dims[0])
    return table, [SymbolVolume(dims, ids[m].copy(), table) for m in range(len(members))]


def _sinpi(x: float) -> float:
    """sin(pi * x) that is exactly zero at integers."""
    r = math.fmod(x, 2.0)
    if r == math.floor(r):
        return 0.0
    return math.sin(math.pi * r)


def gen_abc_flow(
    A: float = math.sqrt(3.0),
    B: float = math.sqrt(2.0),
    C: float = 1.0,
    t: float = 0.0,
    dims: Sequence[int] = (64, 64, 64),
    domain: Sequence[tuple[float, float]] | None = None,
    variant: str = "faithful",
) -> tuple[Volume, Volume, Volume, Volume]:
    """Time-modulated ABC flow sampled on a regular grid.

    Returns ``(vx, vy, vz, s1)`` where ``s1`` is the velocity magnitude.
    ``variant="faithful"`` uses ``0.5 t sin(0.1 pi t)`` in the first
    component and ``0.5 sin(0.1 pi t)`` in the second, as printed;
    ``"symmetric"`` uses ``0.5 t sin(0.1 pi t)`` in both.  The grid is
    ``[lo, hi)`` per axis, default ``[0, 2 pi)``.
    """
    nx, ny, nz = _check_dims(dims)
    if variant not in ("faithful", "symmetric"):
        raise VolumeError(f"unknown ABC-flow variant {variant!r}")
    if domain is None:
        domain = [(0.0, 2.0 * math.pi)] * 3
    axes = [lo + (hi - lo) * np.arange(n) / n for (lo, hi), n in zip(domain, (nx, ny, nz))]
    z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    s = _sinpi(t / 10.0)
    a1 = A + 0.5 * t * s
    a2 = A + (0.5 * t * s if variant == "symmetric" else 0.5 * s)
    vx = a1 * np.sin(z) + C * np.cos(y)
    vy = B * np.sin(x) + a2 * np.cos(z)
    vz = C * np.sin(y) + B * np.cos(x)
    s1 = np.sqrt(vx * vx + vy * vy + vz * vz)
    return tuple(Volume.from_array(a) for a in (vx, vy, vz, s1))
