"""Geometry-aware voxelization: iso-surface edge crossings per cell, a sigmoid
mapping from crossing count to a resolution value, and resolution-adaptive
placement of attention query points.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .grid import VoxelGrid

MAX_CROSSINGS = 12

# the 12 edges of a unit cube as pairs of corner offsets
CUBE_EDGES = tuple(
    (a, b)
    for a in np.ndindex(2, 2, 2)
    for b in np.ndindex(2, 2, 2)
    if a < b and sum(x != y for x, y in zip(a, b)) == 1
)


@dataclass(frozen=True, eq=False)
class ComplexityGrid:
    counts: np.ndarray  # (h, w, z) int, in [0, 12]
    iso_level: float

    @property
    def dims(self):
        return tuple(self.counts.shape)


@dataclass(frozen=True, eq=False)
class ResolutionGrid:
    values: np.ndarray  # (h, w, z), strictly inside (0, 1)
    c0: float
    s: float

    @property
    def dims(self):
        return tuple(self.values.shape)


def edge_crossing_count(field, iso: float = 0.5) -> ComplexityGrid:
    """Count iso-level crossings on the 12 edges of each voxel's cell.

    The cell of voxel ``(i, j, k)`` has corners at the voxel centers
    ``(i..i+1, j..j+1, k..k+1)``; corners past the last voxel clamp onto it, so
    their edges collapse and never cross. An edge crosses when
    ``min(a, b) < iso <= max(a, b)``, which is exactly where marching cubes
    would place a surface vertex.
    """
    values = field.data if isinstance(field, VoxelGrid) else np.asarray(field, dtype=np.float64)
    if values.ndim == 3:
        values = values[..., None]
    if values.ndim != 4 or values.shape[-1] != 1:
        raise InvalidArgumentError(f"edge_crossing_count needs a scalar field, got shape {values.shape}")
    f = values[..., 0]
    dims = f.shape
    idx = [np.arange(n) for n in dims]
    nxt = [np.minimum(np.arange(n) + 1, n - 1) for n in dims]

    def corner(c):
        sel = [nxt[ax] if c[ax] else idx[ax] for ax in range(3)]
        return f[np.ix_(*sel)]

    corners = {c: corner(c) for c in np.ndindex(2, 2, 2)}
    counts = np.zeros(dims, dtype=np.int64)
    for a, b in CUBE_EDGES:
        va, vb = corners[a], corners[b]
        counts += (np.minimum(va, vb) < iso) & (iso <= np.maximum(va, vb))
    return ComplexityGrid(counts, float(iso))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def resolution_map(complexity, c0: float = 6.0, s: float = 2.0) -> ResolutionGrid:
    """``R = sigmoid((C - c0) / s)``, kept strictly inside (0, 1)."""
    if not s > 0:
        raise InvalidArgumentError(f"sigmoid scale s must be positive, got {s}")
    counts = complexity.counts if isinstance(complexity, ComplexityGrid) else np.asarray(complexity)
    r = _sigmoid((counts.astype(np.float64) - c0) / s)
    r = np.clip(r, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return ResolutionGrid(r, float(c0), float(s))


def default_stencil(n_points: int = 6) -> np.ndarray:
    """Symmetric unit directions: the center for odd counts, then axis pairs, then cube diagonals."""
    n_points = int(n_points)
    axes = [np.eye(3)[i] * sgn for i in range(3) for sgn in (1.0, -1.0)]
    corners = [np.array(c, dtype=float) * 2 - 1 for c in list(np.ndindex(2, 2, 2))[:4]]
    diag = [sgn * c / np.sqrt(3.0) for c in corners for sgn in (1.0, -1.0)]
    pool = axes + diag
    if not 1 <= n_points <= len(pool) + 1:
        raise InvalidArgumentError(f"n_points must be in [1, {len(pool) + 1}], got {n_points}")
    dirs = [np.zeros(3)] if n_points % 2 else []
    dirs += pool[: n_points - len(dirs)]
    return np.stack(dirs)


def adaptive_query_points(p, r: float, delta, offsets, stencil) -> np.ndarray:
    """``p'_k = p + delta * R * stencil_k + offset_k`` for every stencil entry.

    ``delta`` may be a scalar or a per-axis 3-vector.
    """
    p = np.asarray(p, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    stencil = np.asarray(stencil, dtype=np.float64).reshape(-1, 3)
    if len(offsets) != len(stencil):
        raise InvalidArgumentError(f"{len(offsets)} offsets for {len(stencil)} stencil directions")
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise InvalidArgumentError(f"delta must be non-negative, got {delta}")
    return p + (delta * r) * stencil + offsets


def offset_head(f, wp) -> np.ndarray:
    """Learned offsets ``reshape(W_p @ f)`` as an ``(n_points, 3)`` array."""
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    wp = np.asarray(wp, dtype=np.float64)
    if wp.ndim != 2 or wp.shape[1] != len(f):
        raise InvalidArgumentError(f"offset head expects input dim {wp.shape[-1]}, got {len(f)}")
    if wp.shape[0] % 3:
        raise InvalidArgumentError(f"offset head output dim {wp.shape[0]} is not a multiple of 3")
    return (wp @ f).reshape(-1, 3)


def default_delta(dims) -> np.ndarray:
    """Half a voxel along each axis, in normalized units."""
    return np.array([1.0 / (n - 1) if n > 1 else 0.0 for n in dims])
