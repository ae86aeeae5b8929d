"""Sparse coordinate sets over a flat parameter space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoordinateError


def round_half_away(x: float) -> int:
    """Kept-count rounding rule: round half away from zero."""
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


@dataclass(frozen=True)
class CoordinateSet:
    """Sorted, duplicate-free active coordinate indices over [0, dim),
    optionally annotated with the per-layer kept fractions they came from."""

    indices: np.ndarray
    dim: int
    layer_keep: np.ndarray | None = None  # kept fraction per segment, or None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.dim:
                raise CoordinateError(f"index outside [0, {self.dim})")
            if np.any(np.diff(idx) <= 0):
                raise CoordinateError("indices must be sorted strictly increasing")
        idx.flags.writeable = False

    def __len__(self):
        return int(self.indices.size)

    @classmethod
    def full(cls, dim: int) -> "CoordinateSet":
        return cls(np.arange(dim, dtype=np.int64), dim)

    @classmethod
    def empty(cls, dim: int) -> "CoordinateSet":
        return cls(np.zeros(0, dtype=np.int64), dim)

    @classmethod
    def from_indices(cls, indices, dim: int) -> "CoordinateSet":
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        return cls(idx, dim)


def write_index_file(path, cset: CoordinateSet):
    """One coordinate index per line."""
    with open(path, "w") as fh:
        fh.write(f"# dim={cset.dim}\n")
        for i in cset.indices:
            fh.write(f"{int(i)}\n")


def read_index_file(path) -> CoordinateSet:
    dim = None
    idx = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "dim=" in line:
                    dim = int(line.split("dim=")[1])
                continue
            idx.append(int(line))
    if dim is None:
        raise CoordinateError(f"{path}: missing dim header")
    return CoordinateSet(np.array(sorted(idx), dtype=np.int64), dim)


def write_lpr_file(path, layer_keep):
    """One `layer,keep_fraction` row per segment."""
    with open(path, "w") as fh:
        for layer, keep in enumerate(layer_keep):
            fh.write(f"{layer},{float(keep)!r}\n")


def read_lpr_file(path) -> np.ndarray:
    rows = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            layer, keep = line.split(",")
            rows[int(layer)] = float(keep)
    return np.array([rows[i] for i in sorted(rows)], dtype=np.float64)
