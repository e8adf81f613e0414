"""Pinhole projection and single-head deformable attention.

``deformable_attention`` attends over a handful of sampled locations in a 3-D
voxel grid or a 2-D feature map. ``dca`` averages it over the camera views
that see a voxel; ``dsa`` runs it over the voxel grid itself with query points
spread according to the per-voxel resolution value.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gav, stn
from .errors import BehindCameraError, FormatError, InvalidArgumentError
from .grid import VoxelGrid

Z_MIN = 1e-6
QUERY_SOURCES = ("position", "content")


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9, rtol=0) or not np.linalg.det(r) > 0:
            raise InvalidArgumentError("camera rotation must be orthonormal with det +1")
        if int(self.width) < 1 or int(self.height) < 1:
            raise InvalidArgumentError(f"image dims must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def project_points(points, cam: CameraModel):
    """Vectorized projection; returns ``(u, v, depth)`` arrays without the behind-camera check."""
    pc = cam.to_camera(points)
    z = pc[..., 2]
    safe = np.where(z > Z_MIN, z, 1.0)
    u = cam.fx * pc[..., 0] / safe + cam.cx
    v = cam.fy * pc[..., 1] / safe + cam.cy
    return u, v, z


def project_to_image(point, cam: CameraModel):
    pc = cam.to_camera(np.asarray(point, dtype=np.float64).reshape(3))
    if pc[2] <= Z_MIN:
        raise BehindCameraError(f"point {np.asarray(point).tolist()} is behind the camera (z = {pc[2]:.3g})")
    return cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy, pc[2]


def backproject_pixel(u, v, depth, cam: CameraModel) -> np.ndarray:
    """Inverse of :func:`project_to_image` given the camera-frame depth."""
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    pc = np.stack([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth], axis=-1)
    return (pc - cam.translation) @ cam.rotation


def in_image(u, v, cam: CameraModel):
    return (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)


def pixel_to_normalized(u, v, cam: CameraModel, map_shape) -> np.ndarray:
    """Map pixel coordinates onto ``(row, col)`` normalized coordinates of a feature map."""
    rows, cols = map_shape[:2]
    r = np.asarray(v, dtype=np.float64) * rows / cam.height - 0.5
    c = np.asarray(u, dtype=np.float64) * cols / cam.width - 0.5
    nr = -1.0 + 2.0 * r / (rows - 1) if rows > 1 else np.zeros_like(r)
    nc = -1.0 + 2.0 * c / (cols - 1) if cols > 1 else np.zeros_like(c)
    return np.stack([nr, nc], axis=-1)


# --------------------------------------------------------------------------- camera files

def format_cameras(cams) -> str:
    blocks = []
    for cam in cams:
        lines = ["camera"]
        for name in ("fx", "fy", "cx", "cy"):
            lines.append(f"{name} {getattr(cam, name)!r}")
        lines.append("R " + " ".join(repr(float(x)) for x in cam.rotation.ravel()))
        lines.append("t " + " ".join(repr(float(x)) for x in cam.translation))
        lines.append(f"width {cam.width}")
        lines.append(f"height {cam.height}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def parse_cameras(text: str) -> list[CameraModel]:
    cams, fields = [], None
    offset = 0

    def finish(at):
        missing = {"fx", "fy", "cx", "cy", "R", "t", "width", "height"} - set(fields)
        if missing:
            raise FormatError(f"camera block missing fields {sorted(missing)}", at)
        try:
            cams.append(CameraModel(fields["fx"][0], fields["fy"][0], fields["cx"][0], fields["cy"][0],
                                    np.reshape(fields["R"], (3, 3)), fields["t"],
                                    int(fields["width"][0]), int(fields["height"][0])))
        except (InvalidArgumentError, ValueError) as exc:
            raise FormatError(f"invalid camera: {exc}", at) from exc

    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped == "camera":
            if fields is not None:
                finish(offset)
            fields = {}
        elif stripped and not stripped.startswith("#"):
            if fields is None:
                raise FormatError(f"expected 'camera' block header, got {stripped!r}", offset)
            key, *vals = stripped.split()
            sizes = {"R": 9, "t": 3}
            try:
                nums = [float(x) for x in vals]
            except ValueError:
                raise FormatError(f"non-numeric value in {key!r} line", offset) from None
            if key not in ("fx", "fy", "cx", "cy", "R", "t", "width", "height") or len(nums) != sizes.get(key, 1):
                raise FormatError(f"bad camera line {stripped!r}", offset)
            fields[key] = nums
        offset += len(line.encode())
    if fields is not None:
        finish(offset)
    if not cams:
        raise FormatError("no camera blocks found", 0)
    return cams


def write_cameras(path, cams) -> None:
    Path(path).write_text(format_cameras(cams))


def read_cameras(path) -> list[CameraModel]:
    return parse_cameras(Path(path).read_text())


# --------------------------------------------------------------------------- attention

@dataclass(frozen=True, eq=False)
class AttentionParams:
    wq: np.ndarray  # (d_k, pos_dim * n_points) or (d_k, d_f) for content queries
    wk: np.ndarray  # (d_k, c)
    wv: np.ndarray  # (d_v, c)
    wp: np.ndarray  # (pos_dim * n_points, d_f)
    n_points: int
    pos_dim: int = 3
    query_source: str = "position"

    def __post_init__(self):
        arrs = {k: np.array(getattr(self, k), dtype=np.float64) for k in ("wq", "wk", "wv", "wp")}
        for k, a in arrs.items():
            if a.ndim != 2 or not np.all(np.isfinite(a)):
                raise InvalidArgumentError(f"{k} must be a finite 2-D matrix")
            object.__setattr__(self, k, a)
        if self.query_source not in QUERY_SOURCES:
            raise InvalidArgumentError(f"query_source must be one of {QUERY_SOURCES}, got {self.query_source!r}")
        if self.wq.shape[0] < 1 or self.wk.shape[0] != self.wq.shape[0]:
            raise InvalidArgumentError(f"Wq and Wk must share d_k >= 1, got {self.wq.shape}, {self.wk.shape}")
        if self.wk.shape[1] != self.wv.shape[1]:
            raise InvalidArgumentError("Wk and Wv must read the same field channels")
        if self.wp.shape[0] != self.pos_dim * self.n_points:
            raise InvalidArgumentError(f"Wp must emit {self.pos_dim * self.n_points} offsets, got {self.wp.shape[0]}")
        if self.query_source == "position" and self.wq.shape[1] != self.pos_dim * self.n_points:
            raise InvalidArgumentError(f"position queries need Wq with {self.pos_dim * self.n_points} inputs")
        if self.query_source == "content" and self.wq.shape[1] != self.wp.shape[1]:
            raise InvalidArgumentError("content queries need Wq with the query feature dim as input")

    @property
    def d_k(self) -> int:
        return self.wq.shape[0]

    @property
    def d_in(self) -> int:
        return self.wp.shape[1]

    @property
    def field_dim(self) -> int:
        return self.wk.shape[1]

    @property
    def d_out(self) -> int:
        return self.wv.shape[0]

    @classmethod
    def random(cls, d_in: int, field_dim: int, d_out: int, d_k: int, n_points: int, rng, *, pos_dim: int = 3,
               offset_scale: float = 0.0, query_source: str = "position") -> "AttentionParams":
        q_in = pos_dim * n_points if query_source == "position" else d_in
        return cls(wq=rng.standard_normal((d_k, q_in)) / np.sqrt(q_in),
                   wk=rng.standard_normal((d_k, field_dim)) / np.sqrt(field_dim),
                   wv=rng.standard_normal((d_out, field_dim)) / np.sqrt(field_dim),
                   wp=offset_scale * rng.standard_normal((pos_dim * n_points, d_in)),
                   n_points=n_points, pos_dim=pos_dim, query_source=query_source)

    def zeros_like(self) -> "AttentionParams":
        return AttentionParams(np.zeros_like(self.wq), np.zeros_like(self.wk), np.zeros_like(self.wv),
                               np.zeros_like(self.wp), self.n_points, self.pos_dim, self.query_source)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _field_values(field) -> np.ndarray:
    return field.data if isinstance(field, VoxelGrid) else np.asarray(field, dtype=np.float64)


def deformable_attention(f, points, field, params: AttentionParams, return_weights: bool = False):
    """Attend from one query over ``n_points`` sampled field locations."""
    values = _field_values(field)
    points = np.asarray(points, dtype=np.float64).reshape(-1, values.ndim - 1)
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    if len(points) != params.n_points or points.shape[1] != params.pos_dim:
        raise InvalidArgumentError(f"expected {params.n_points} points of dim {params.pos_dim}, got {points.shape}")
    if values.shape[-1] != params.field_dim:
        raise InvalidArgumentError(f"field has {values.shape[-1]} channels, params expect {params.field_dim}")
    if params.query_source == "content" and len(f) != params.wq.shape[1]:
        raise InvalidArgumentError(f"query feature length {len(f)} != {params.wq.shape[1]}")
    samples = stn.interpolate(values, points)
    query = params.wq @ (points.reshape(-1) if params.query_source == "position" else f)
    keys = samples @ params.wk.T
    vals = samples @ params.wv.T
    weights = softmax(keys @ query / np.sqrt(params.d_k))
    out = weights @ vals
    return (out, weights) if return_weights else out


def _attend_batch(query_in: np.ndarray, samples: np.ndarray, params: AttentionParams):
    query = query_in @ params.wq.T  # (N, d_k)
    keys = samples @ params.wk.T  # (N, n, d_k)
    vals = samples @ params.wv.T
    weights = softmax(np.einsum("nkd,nd->nk", keys, query) / np.sqrt(params.d_k))
    return np.einsum("nk,nkv->nv", weights, vals), weights


def _image_reference(p, image, cam, params):
    fmap = np.asarray(image, dtype=np.float64)
    u, v, z = project_points(np.asarray(p, dtype=np.float64)[None], cam)
    if not (z[0] > Z_MIN and in_image(u, v, cam)[0]):
        return None
    return pixel_to_normalized(u, v, cam, fmap.shape)[0]


def dca(q_p, p, images, params: AttentionParams, return_hits: bool = False):
    """Average deformable attention over the views in which world point ``p`` is visible.

    ``images`` is a list of ``(feature_map, camera)`` pairs. With no visible
    view the query passes through unchanged.
    """
    if not images:
        raise InvalidArgumentError("dca needs at least one image")
    q_p = np.asarray(q_p, dtype=np.float64).reshape(-1)
    offsets = (params.wp @ q_p).reshape(params.n_points, params.pos_dim)
    results = []
    for fmap, cam in images:
        ref = _image_reference(p, fmap, cam, params)
        if ref is None:
            continue
        results.append(deformable_attention(q_p, ref + offsets, fmap, params))
    out = np.sum(results, axis=0) / len(results) if results else q_p.copy()
    return (out, len(results)) if return_hits else out


def dca_batch(queries, points, images, params: AttentionParams):
    """:func:`dca` for ``(N, d)`` queries at ``(N, 3)`` world points; returns ``(out, hits)``."""
    if not images:
        raise InvalidArgumentError("dca needs at least one image")
    queries = np.asarray(queries, dtype=np.float64)
    n = len(queries)
    offsets = (queries @ params.wp.T).reshape(n, params.n_points, params.pos_dim)
    total = np.zeros((n, params.d_out))
    hits = np.zeros(n, dtype=np.int64)
    for fmap, cam in images:
        fmap = np.asarray(fmap, dtype=np.float64)
        u, v, z = project_points(points, cam)
        vis = (z > Z_MIN) & in_image(u, v, cam)
        if not vis.any():
            continue
        ref = pixel_to_normalized(u[vis], v[vis], cam, fmap.shape)
        pts = ref[:, None, :] + offsets[vis]
        samples = stn.interpolate(fmap, pts)
        q_in = pts.reshape(len(pts), -1) if params.query_source == "position" else queries[vis]
        out, _ = _attend_batch(q_in, samples, params)
        total[vis] += out
        hits[vis] += 1
    seen = hits > 0
    result = queries.copy() if params.d_out == queries.shape[1] else np.zeros((n, params.d_out))
    result[seen] = total[seen] / hits[seen, None]
    return result, hits


def dsa(f3d: VoxelGrid, resolution, params: AttentionParams, delta=None, stencil=None,
        return_weights: bool = False):
    """Resolution-adaptive deformable self-attention over a voxel grid."""
    r = resolution.values if isinstance(resolution, gav.ResolutionGrid) else np.asarray(resolution, dtype=np.float64)
    if r.shape != f3d.dims:
        raise InvalidArgumentError(f"resolution dims {r.shape} != feature dims {f3d.dims}")
    if params.pos_dim != 3 or params.field_dim != f3d.feature_dim or params.d_in != f3d.feature_dim:
        raise InvalidArgumentError(f"attention params do not match a {f3d.feature_dim}-channel 3-D grid")
    n = int(np.prod(f3d.dims))
    delta = gav.default_delta(f3d.dims) if delta is None else np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise InvalidArgumentError(f"delta must be non-negative, got {delta}")
    stencil = gav.default_stencil(params.n_points) if stencil is None else np.asarray(stencil, dtype=np.float64)
    if stencil.shape != (params.n_points, 3):
        raise InvalidArgumentError(f"stencil must be ({params.n_points}, 3), got {stencil.shape}")
    f = f3d.data.reshape(n, -1)
    lattice = stn.normalized_lattice(f3d.dims).reshape(n, 1, 3)
    offsets = (f @ params.wp.T).reshape(n, params.n_points, 3)
    points = lattice + (delta * r.reshape(n, 1, 1)) * stencil + offsets
    samples = stn.interpolate(f3d.data, points)
    q_in = points.reshape(n, -1) if params.query_source == "position" else f
    out, weights = _attend_batch(q_in, samples, params)
    grid = f3d.with_data(out.reshape(f3d.dims + (params.d_out,)))
    return (grid, weights) if return_weights else grid
