"""Spatial transformer primitives: affine prediction, sampling grids, linear
interpolation (with analytic vector-Jacobian products) and affine inversion.

Normalized coordinates follow align-corners semantics: -1 is the center of
the first voxel along an axis and +1 the center of the last. A length-1 axis
maps every coordinate to its single voxel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, SingularTransformError
from .grid import VoxelGrid

DET_EPSILON = 1e-6
REGULARIZATION_STEPS = (0.0, 1e-3, 1e-2, 1e-1, 1.0)
IDENTITY_PARAMS = np.array([1.0, 0, 0, 0, 0, 1.0, 0, 0, 0, 0, 1.0, 0])


@dataclass(frozen=True, eq=False)
class AffineTheta:
    """``P_in = matrix @ P_out + translation`` in normalized grid coordinates."""

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        a = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("affine parameters must be finite")
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "AffineTheta":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_params(cls, params) -> "AffineTheta":
        """From 12 values laid out row-major as ``[A | t]``."""
        p = np.asarray(params, dtype=np.float64).reshape(3, 4)
        return cls(p[:, :3], p[:, 3])

    def params(self) -> np.ndarray:
        return np.concatenate([self.matrix, self.translation[:, None]], axis=1).ravel()

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + self.translation

    def compose(self, inner: "AffineTheta") -> "AffineTheta":
        """``self ∘ inner``: apply ``inner`` first."""
        return AffineTheta(self.matrix @ inner.matrix, self.matrix @ inner.translation + self.translation)


@dataclass(frozen=True, eq=False)
class LocNetParams:
    """Single linear layer mapping a (d+d')-vector to 12 affine parameters."""

    weight: np.ndarray  # (12, d_in)
    bias: np.ndarray  # (12,)

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or w.shape[0] != 12 or b.shape != (12,):
            raise InvalidArgumentError(f"LocNet weight must be (12, d_in) and bias (12,), got {w.shape}, {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise InvalidArgumentError("LocNet parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def identity(cls, in_dim: int, scale: float = 0.0, rng=None) -> "LocNetParams":
        """Identity bias; weights zero, or Gaussian with std ``scale`` when an rng is given."""
        w = np.zeros((12, in_dim)) if rng is None or scale == 0 else scale * rng.standard_normal((12, in_dim))
        return cls(w, IDENTITY_PARAMS.copy())


def regularize_params(raw: np.ndarray) -> np.ndarray:
    """Shift the linear part toward identity until ``|det A| >= DET_EPSILON``.

    ``raw`` holds one or more 12-vectors (``[..., 12]``). The smallest shift in
    ``REGULARIZATION_STEPS`` that works is used per transform.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise SingularTransformError("affine parameters are not finite")
    p = raw.reshape(-1, 3, 4).copy()
    a = p[:, :, :3]
    done = np.zeros(len(p), dtype=bool)
    out = p.copy()
    eye = np.eye(3)
    for lam in REGULARIZATION_STEPS:
        shifted = a + lam * eye
        ok = ~done & (np.abs(np.linalg.det(shifted)) >= DET_EPSILON)
        out[ok, :, :3] = shifted[ok]
        done |= ok
    if not done.all():
        bad = int(np.flatnonzero(~done)[0])
        raise SingularTransformError(
            f"affine transform {bad} stays singular after regularization (|det| < {DET_EPSILON})")
    return out.reshape(raw.shape)


def locnet_forward(q, params: LocNetParams) -> AffineTheta:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != params.in_dim:
        raise InvalidArgumentError(f"LocNet expects a {params.in_dim}-vector, got length {q.shape[0]}")
    return AffineTheta.from_params(regularize_params(params.weight @ q + params.bias))


def locnet_forward_batch(features: np.ndarray, params: LocNetParams) -> np.ndarray:
    """Per-row transforms for an ``(N, d_in)`` feature matrix, as ``(N, 12)`` parameters."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.in_dim:
        raise InvalidArgumentError(f"LocNet expects (N, {params.in_dim}) features, got {features.shape}")
    return regularize_params(features @ params.weight.T + params.bias)


def normalized_axis(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def normalized_lattice(dims) -> np.ndarray:
    """Normalized coordinate of every voxel center, shape ``dims + (3,)``."""
    axes = [normalized_axis(int(n)) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def generate_sampling_grid(theta: AffineTheta, out_dims) -> np.ndarray:
    out_dims = tuple(int(n) for n in out_dims)
    if len(out_dims) != 3 or any(n < 1 for n in out_dims):
        raise InvalidArgumentError(f"out_dims must be three positive integers, got {out_dims}")
    return theta.apply(normalized_lattice(out_dims))


# --------------------------------------------------------------------------- interpolation

def _corner_setup(positions: np.ndarray, dims):
    """Lower corner index, fractional part, upper index and in-range mask per axis."""
    lows, fracs, highs, inside = [], [], [], []
    for ax, n in enumerate(dims):
        p = positions[..., ax]
        inside.append((p >= -1.0) & (p <= 1.0))
        if n == 1:
            zero = np.zeros(p.shape, dtype=np.intp)
            lows.append(zero)
            highs.append(zero)
            fracs.append(np.zeros(p.shape))
            continue
        x = (np.clip(p, -1.0, 1.0) + 1.0) * 0.5 * (n - 1)
        # snap round-off so lattice positions hit their node exactly
        r = np.rint(x)
        x = np.where(np.abs(x - r) < 1e-12 * n, r, x)
        i0 = np.clip(np.floor(x).astype(np.intp), 0, n - 2)
        lows.append(i0)
        fracs.append(x - i0)
        highs.append(i0 + 1)
    return lows, fracs, highs, inside


def _check_positions(values: np.ndarray, positions: np.ndarray) -> tuple[np.ndarray, int]:
    positions = np.asarray(positions, dtype=np.float64)
    ndim = values.ndim - 1
    if positions.shape[-1] != ndim:
        raise InvalidArgumentError(f"positions must end in a {ndim}-vector for a {ndim}-D field, "
                                   f"got shape {positions.shape}")
    if not np.all(np.isfinite(positions)):
        raise InvalidArgumentError("sampling positions must be finite")
    return positions, ndim


def interpolate(values: np.ndarray, positions) -> np.ndarray:
    """Multilinear interpolation of a ``(*spatial, C)`` array at normalized positions.

    Handles 3-D (trilinear) and 2-D (bilinear) fields alike. Positions outside
    [-1, 1] are clamped to the border. Returns ``positions.shape[:-1] + (C,)``.
    """
    values = np.asarray(values, dtype=np.float64)
    positions, ndim = _check_positions(values, positions)
    lows, fracs, highs, _ = _corner_setup(positions, values.shape[:ndim])
    out = np.zeros(positions.shape[:-1] + (values.shape[-1],))
    for corner in range(1 << ndim):
        idx, w = [], 1.0
        for ax in range(ndim):
            if corner >> (ndim - 1 - ax) & 1:
                idx.append(highs[ax])
                w = w * fracs[ax]
            else:
                idx.append(lows[ax])
                w = w * (1.0 - fracs[ax])
        out += w[..., None] * values[tuple(idx)]
    return out


def interpolate_grad(values: np.ndarray, positions, upstream: np.ndarray):
    """Vector-Jacobian products of :func:`interpolate` w.r.t. values and positions.

    Clamped coordinates (outside [-1, 1]) receive zero position gradient.
    """
    values = np.asarray(values, dtype=np.float64)
    positions, ndim = _check_positions(values, positions)
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = positions.shape[:-1] + (values.shape[-1],)
    if upstream.shape != expected:
        raise InvalidArgumentError(f"upstream shape {upstream.shape} does not match sample shape {expected}")
    dims = values.shape[:ndim]
    lows, fracs, highs, inside = _corner_setup(positions, dims)
    grad_values = np.zeros_like(values)
    grad_frac = [np.zeros(positions.shape[:-1]) for _ in range(ndim)]
    for corner in range(1 << ndim):
        idx, w, bits = [], 1.0, []
        for ax in range(ndim):
            bit = corner >> (ndim - 1 - ax) & 1
            bits.append(bit)
            idx.append(highs[ax] if bit else lows[ax])
            w = w * (fracs[ax] if bit else 1.0 - fracs[ax])
        idx = tuple(idx)
        np.add.at(grad_values, idx, w[..., None] * upstream)
        dot = np.einsum("...c,...c->...", values[idx], upstream)
        for ax in range(ndim):
            dw = 1.0
            for other in range(ndim):
                if other == ax:
                    dw = dw * (1.0 if bits[ax] else -1.0)
                else:
                    dw = dw * (fracs[other] if bits[other] else 1.0 - fracs[other])
            grad_frac[ax] += dw * dot
    grad_pos = np.zeros(positions.shape)
    for ax, n in enumerate(dims):
        if n > 1:
            grad_pos[..., ax] = np.where(inside[ax], grad_frac[ax] * 0.5 * (n - 1), 0.0)
    return grad_values, grad_pos


def _field_values(field) -> np.ndarray:
    return field.data if isinstance(field, VoxelGrid) else np.asarray(field, dtype=np.float64)


def trilinear_sample(field, positions, out_feature_dim: int | None = None):
    """Sample a feature grid at normalized 3-D positions.

    With ``VoxelGrid`` input and an ``(h, w, z, 3)`` position grid the result
    is a ``VoxelGrid`` carrying the field's metadata; otherwise an array.
    """
    values = _field_values(field)
    if values.ndim != 4:
        raise InvalidArgumentError(f"trilinear_sample needs a 3-D feature grid, got shape {values.shape}")
    if out_feature_dim is not None and out_feature_dim != values.shape[-1]:
        raise InvalidArgumentError(
            f"declared output feature_dim {out_feature_dim} != field feature_dim {values.shape[-1]}")
    out = interpolate(values, positions)
    if isinstance(field, VoxelGrid) and out.ndim == 4:
        return field.with_data(out)
    return out


def trilinear_sample_grad(field, positions, upstream):
    """Return ``(grad_field, grad_positions)`` as arrays."""
    values = _field_values(field)
    if values.ndim != 4:
        raise InvalidArgumentError(f"trilinear_sample_grad needs a 3-D feature grid, got shape {values.shape}")
    up = upstream.data if isinstance(upstream, VoxelGrid) else upstream
    return interpolate_grad(values, positions, up)


def bilinear_sample(feature_map, positions) -> np.ndarray:
    """Sample an ``(H, W, C)`` map at normalized ``(row, col)`` positions."""
    values = np.asarray(feature_map, dtype=np.float64)
    if values.ndim != 3:
        raise InvalidArgumentError(f"bilinear_sample needs an (H, W, C) map, got shape {values.shape}")
    return interpolate(values, positions)


def invert_theta(theta: AffineTheta) -> AffineTheta:
    det = np.linalg.det(theta.matrix)
    if not abs(det) >= DET_EPSILON:
        raise SingularTransformError(f"cannot invert affine transform with |det| = {abs(det):.3g}")
    inv = np.linalg.inv(theta.matrix)
    return AffineTheta(inv, -inv @ theta.translation)


def invert_params(params: np.ndarray) -> np.ndarray:
    """Batched :func:`invert_theta` on ``(N, 12)`` parameter rows."""
    p = np.asarray(params, dtype=np.float64).reshape(-1, 3, 4)
    a, t = p[:, :, :3], p[:, :, 3]
    det = np.linalg.det(a)
    if not np.all(np.abs(det) >= DET_EPSILON):
        raise SingularTransformError("cannot invert a near-singular affine transform")
    inv = np.linalg.inv(a)
    return np.concatenate([inv, -np.einsum("nij,nj->ni", inv, t)[..., None]], axis=2).reshape(-1, 12)


def apply_params(params: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply per-row ``(N, 12)`` transforms to ``(N, 3)`` points."""
    p = np.asarray(params, dtype=np.float64).reshape(-1, 3, 4)
    return np.einsum("nij,nj->ni", p[:, :, :3], points) + p[:, :, 3]
