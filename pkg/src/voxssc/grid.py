"""Voxel grid containers, synthetic scenes and the binary grid file formats.

Index ``(i, j, k)`` maps to the world point ``origin + voxel_size * (i + .5,
j + .5, k + .5)``. Arrays are row-major with ``i`` slowest and the feature
index fastest, which is numpy's C order for shape ``(h, w, z, d)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError

IGNORE_LABEL = 255
DEFAULT_NUM_CLASSES = 20
DEFAULT_DIMS = (32, 32, 16)
DEFAULT_VOXEL_SIZE = 0.4

# guards against headers that would make us allocate absurd buffers
MAX_ELEMENTS = 1 << 31


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or any(n < 1 for n in dims):
        raise InvalidArgumentError(f"grid dims must be three positive integers, got {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    data: np.ndarray  # (h, w, z, d) float64
    voxel_size: float = DEFAULT_VOXEL_SIZE
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 4:
            raise InvalidArgumentError(f"VoxelGrid data must be 4-D (h, w, z, d), got shape {data.shape}")
        _check_dims(data.shape[:3])
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("VoxelGrid data contains NaN or Inf")
        if not self.voxel_size > 0:
            raise InvalidArgumentError(f"voxel_size must be positive, got {self.voxel_size}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def feature_dim(self) -> int:
        return self.data.shape[3]

    def with_data(self, data: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(data, self.voxel_size, self.origin)

    def centers(self) -> np.ndarray:
        return voxel_centers(self.dims, self.voxel_size, self.origin)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    data: np.ndarray  # (h, w, z) uint8 in {0, 1}

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidArgumentError(f"OccupancyGrid must be 3-D, got shape {data.shape}")
        _check_dims(data.shape)
        if data.dtype == bool:
            data = data.astype(np.uint8)
        if not np.all((data == 0) | (data == 1)):
            raise InvalidArgumentError("occupancy values must be 0 or 1")
        data = np.ascontiguousarray(data, dtype=np.uint8)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))


@dataclass(frozen=True, eq=False)
class SemanticGrid:
    labels: np.ndarray  # (H, W, Z) uint8; 0 empty, 255 ignore
    num_classes: int = DEFAULT_NUM_CLASSES

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise InvalidArgumentError(f"SemanticGrid must be 3-D, got shape {labels.shape}")
        _check_dims(labels.shape)
        if not 1 <= int(self.num_classes) <= IGNORE_LABEL:
            raise InvalidArgumentError(f"num_classes must be in [1, 255], got {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() > IGNORE_LABEL):
            raise InvalidArgumentError("labels must fit in one byte")
        labels = np.ascontiguousarray(labels, dtype=np.uint8)
        bad = (labels != IGNORE_LABEL) & (labels >= self.num_classes)
        if bad.any():
            raise InvalidArgumentError(
                f"label {int(labels[bad][0])} out of range for {self.num_classes} classes")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def occupancy(self) -> OccupancyGrid:
        """Occupied = any non-empty, non-ignore label."""
        return OccupancyGrid(((self.labels != 0) & (self.labels != IGNORE_LABEL)).astype(np.uint8))


def voxel_centers(dims, voxel_size: float, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """World coordinates of every voxel center, shape ``dims + (3,)``."""
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij"), axis=-1)
    return np.asarray(origin, dtype=np.float64) + voxel_size * (idx + 0.5)


def new_grid(dims, feature_dim: int, fill: float = 0.0, *, voxel_size: float = DEFAULT_VOXEL_SIZE,
             origin=(0.0, 0.0, 0.0)) -> VoxelGrid:
    dims = _check_dims(dims)
    if int(feature_dim) < 1:
        raise InvalidArgumentError(f"feature_dim must be >= 1, got {feature_dim}")
    data = np.full(dims + (int(feature_dim),), float(fill))
    return VoxelGrid(data, voxel_size, origin)


def downsample_occupancy(occ: OccupancyGrid, factor: int) -> OccupancyGrid:
    """Max-pool occupancy over ``factor``-sided cubic blocks."""
    factor = int(factor)
    if factor < 1:
        raise InvalidArgumentError(f"factor must be >= 1, got {factor}")
    h, w, z = occ.dims
    if h % factor or w % factor or z % factor:
        raise InvalidArgumentError(f"factor {factor} does not divide grid dims {occ.dims}")
    blocks = occ.data.reshape(h // factor, factor, w // factor, factor, z // factor, factor)
    return OccupancyGrid(blocks.max(axis=(1, 3, 5)))


# --------------------------------------------------------------------------- scenes

@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    label: int

    def contains(self, pts):
        d = pts - np.asarray(self.center)
        return np.einsum("...i,...i->...", d, d) <= self.radius ** 2

    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center)
        a = np.einsum("...i,...i->...", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 0, t0, t1)
        return np.where(hit & (t > 0), t, np.inf)


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    label: int

    def contains(self, pts):
        return np.all((pts >= np.asarray(self.lo)) & (pts <= np.asarray(self.hi)), axis=-1)

    def bounds(self):
        return np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)

    def intersect(self, origin, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (np.asarray(self.lo) - origin) * inv
            tb = (np.asarray(self.hi) - origin) * inv
        tmin = np.nanmax(np.minimum(ta, tb), axis=-1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=-1)
        hit = (tmax >= tmin) & (tmax > 0)
        t = np.where(tmin > 0, tmin, tmax)
        return np.where(hit, t, np.inf)


@dataclass(frozen=True)
class Plane:
    """Axis-aligned slab spanning the whole grid, e.g. a ground layer."""

    axis: int
    lo: float
    hi: float
    label: int

    def as_box(self, extent_lo, extent_hi) -> Box:
        lo, hi = list(extent_lo), list(extent_hi)
        lo[self.axis], hi[self.axis] = self.lo, self.hi
        return Box(tuple(lo), tuple(hi), self.label)


@dataclass(frozen=True)
class SceneSpec:
    dims: tuple[int, int, int] = DEFAULT_DIMS
    voxel_size: float = DEFAULT_VOXEL_SIZE
    primitives: tuple = ()
    seed: int = 0
    num_classes: int = DEFAULT_NUM_CLASSES
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    image_dims: tuple[int, int] = (64, 32)

    @property
    def extent(self):
        lo = np.asarray(self.origin, dtype=float)
        return lo, lo + self.voxel_size * np.asarray(self.dims, dtype=float)

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            kind = type(p).__name__.lower()
            prims.append({"kind": kind, **{k: (list(v) if isinstance(v, tuple) else v)
                                           for k, v in p.__dict__.items()}})
        return {"dims": list(self.dims), "voxel_size": self.voxel_size, "seed": self.seed,
                "num_classes": self.num_classes, "origin": list(self.origin),
                "image_dims": list(self.image_dims), "primitives": prims}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        kinds = {"sphere": Sphere, "box": Box, "plane": Plane}
        prims = []
        for p in d.get("primitives", []):
            p = dict(p)
            kind = p.pop("kind", None)
            if kind not in kinds:
                raise InvalidArgumentError(f"unknown primitive kind {kind!r}")
            prims.append(kinds[kind](**{k: (tuple(v) if isinstance(v, list) else v) for k, v in p.items()}))
        return cls(dims=tuple(d.get("dims", DEFAULT_DIMS)),
                   voxel_size=float(d.get("voxel_size", DEFAULT_VOXEL_SIZE)),
                   primitives=tuple(prims), seed=int(d.get("seed", 0)),
                   num_classes=int(d.get("num_classes", DEFAULT_NUM_CLASSES)),
                   origin=tuple(d.get("origin", (0.0, 0.0, 0.0))),
                   image_dims=tuple(d.get("image_dims", (64, 32))))


def default_camera(spec: SceneSpec):
    """Camera one voxel behind the grid's i=0 face, looking along +i (the forward axis).

    World axes: x forward, y left, z up. Camera axes: x right, y down, z forward.
    """
    from .attention import CameraModel

    lo, hi = spec.extent
    center = np.array([lo[0] - spec.voxel_size, 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])])
    rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    width, height = spec.image_dims
    f = width / 2.0  # 90 degree horizontal field of view
    return CameraModel(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                       rotation=rot, translation=-rot @ center, width=width, height=height)


def _scene_primitives(spec: SceneSpec):
    lo, hi = spec.extent
    prims = []
    tol = 1e-9
    for p in spec.primitives:
        if isinstance(p, Plane):
            if p.axis not in (0, 1, 2):
                raise InvalidArgumentError(f"plane axis must be 0, 1 or 2, got {p.axis}")
            p = p.as_box(lo, hi)
        plo, phi = p.bounds()
        if np.any(plo < lo - tol) or np.any(phi > hi + tol):
            raise InvalidArgumentError(f"primitive {p} lies outside the grid bounds {lo.tolist()}..{hi.tolist()}")
        if not 1 <= p.label < spec.num_classes:
            raise InvalidArgumentError(f"primitive label {p.label} not in 1..{spec.num_classes - 1}")
        prims.append(p)
    return prims


def render_depth(prims, camera) -> np.ndarray:
    """Per-pixel camera-frame depth of the nearest primitive hit; 0 where the ray escapes."""
    u = np.arange(camera.width) + 0.5
    v = np.arange(camera.height) + 0.5
    uu, vv = np.meshgrid(u, v)  # (height, width)
    dirs_cam = np.stack([(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy, np.ones_like(uu)], -1)
    dirs = dirs_cam @ camera.rotation  # R^T d, row-vector form
    origin = camera.center()
    t = np.full(uu.shape, np.inf)
    for p in prims:
        t = np.minimum(t, p.intersect(origin, dirs))
    # dirs_cam has unit z, so the ray parameter is the camera-frame depth
    return np.where(np.isfinite(t), t, 0.0)


def generate_scene(spec: SceneSpec):
    """Rasterize a scene spec.

    Returns ``(occupancy, semantics, camera, depth_image)``. A voxel belongs to
    a primitive when its center lies inside it; later primitives overwrite
    earlier labels.
    """
    dims = _check_dims(spec.dims)
    if not 1 <= spec.num_classes <= IGNORE_LABEL:
        raise InvalidArgumentError(f"num_classes must be in [1, 255], got {spec.num_classes}")
    prims = _scene_primitives(spec)
    centers = voxel_centers(dims, spec.voxel_size, spec.origin)
    labels = np.zeros(dims, dtype=np.uint8)
    for p in prims:
        labels[p.contains(centers)] = p.label
    camera = default_camera(spec)
    depth = render_depth(prims, camera)
    sem = SemanticGrid(labels, spec.num_classes)
    return sem.occupancy(), sem, camera, depth


def random_scene_spec(dims=DEFAULT_DIMS, voxel_size: float = DEFAULT_VOXEL_SIZE, n_primitives: int = 4,
                      seed: int = 0, num_classes: int = DEFAULT_NUM_CLASSES,
                      ground: bool = True) -> SceneSpec:
    """A ground slab plus ``n_primitives`` random spheres and boxes, all inside the grid."""
    rng = np.random.default_rng(seed)
    dims = _check_dims(dims)
    hi = voxel_size * np.asarray(dims, dtype=float)
    prims = []
    if ground:
        prims.append(Plane(axis=2, lo=0.0, hi=2 * voxel_size, label=1))
    for _ in range(n_primitives):
        label = int(rng.integers(2, num_classes)) if num_classes > 2 else 1
        size = rng.uniform(1.5, 4.0) * voxel_size
        size = min(size, 0.45 * hi.min())
        c = rng.uniform(size, hi - size)
        if rng.random() < 0.5:
            prims.append(Sphere(tuple(c.tolist()), float(size), label))
        else:
            half = rng.uniform(0.5, 1.0, size=3) * size
            prims.append(Box(tuple((c - half).tolist()), tuple((c + half).tolist()), label))
    return SceneSpec(dims=dims, voxel_size=voxel_size, primitives=tuple(prims), seed=seed,
                     num_classes=num_classes)


def toy_sphere_spec(dims=(16, 16, 8), voxel_size: float = DEFAULT_VOXEL_SIZE, radius_voxels: float = 3.0,
                    label: int = 1, num_classes: int = DEFAULT_NUM_CLASSES) -> SceneSpec:
    """One sphere centered in the grid."""
    center = tuple((0.5 * voxel_size * np.asarray(dims, dtype=float)).tolist())
    return SceneSpec(dims=tuple(dims), voxel_size=voxel_size,
                     primitives=(Sphere(center, radius_voxels * voxel_size, label),),
                     num_classes=num_classes)


# --------------------------------------------------------------------------- file I/O

_MAGIC_FEATURE = b"VXG1"
_MAGIC_OCC = b"VXO1"
_MAGIC_LABEL = b"VXL1"


def encode_grid(grid) -> bytes:
    if isinstance(grid, VoxelGrid):
        h, w, z, d = grid.data.shape
        header = _MAGIC_FEATURE + struct.pack("<4I4d", h, w, z, d, grid.voxel_size, *grid.origin)
        return header + grid.data.astype("<f4").tobytes()
    if isinstance(grid, OccupancyGrid):
        return _MAGIC_OCC + struct.pack("<3I", *grid.dims) + grid.data.tobytes()
    if isinstance(grid, SemanticGrid):
        return _MAGIC_LABEL + struct.pack("<4I", *grid.dims, grid.num_classes) + grid.labels.tobytes()
    raise InvalidArgumentError(f"cannot encode {type(grid).__name__}")


def write_grid(path, grid) -> None:
    """Write a grid in its binary format. Feature payloads are stored as float32."""
    Path(path).write_bytes(encode_grid(grid))


def _unpack(fmt: str, buf: bytes, offset: int):
    size = struct.calcsize(fmt)
    if len(buf) < offset + size:
        raise FormatError(f"truncated header: need {offset + size} bytes, file has {len(buf)}", len(buf))
    return struct.unpack_from(fmt, buf, offset)


def _payload(buf: bytes, offset: int, dims, itemsize: int) -> bytes:
    n = 1
    for dim in dims:
        if dim < 1:
            raise FormatError(f"header declares zero dimension in {tuple(dims)}", 4)
        n *= dim
    if n > MAX_ELEMENTS:
        raise FormatError(f"header dims {tuple(dims)} overflow the element limit {MAX_ELEMENTS}", 4)
    expected = n * itemsize
    actual = len(buf) - offset
    if actual != expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, got {actual}",
                          offset + min(actual, expected))
    return buf[offset:]


def decode_grid(buf: bytes):
    if len(buf) < 4:
        raise FormatError(f"file too short for magic ({len(buf)} bytes)", 0)
    magic = bytes(buf[:4])
    if magic == _MAGIC_FEATURE:
        h, w, z, d, vs, ox, oy, oz = _unpack("<4I4d", buf, 4)
        payload = _payload(buf, 52, (h, w, z, d), 4)
        data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, z, d)
        if not np.all(np.isfinite(data)):
            bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
            raise FormatError("non-finite feature value", 52 + 4 * bad)
        if not vs > 0:
            raise FormatError(f"voxel_size must be positive, got {vs}", 20)
        return VoxelGrid(data, vs, (ox, oy, oz))
    if magic == _MAGIC_OCC:
        h, w, z = _unpack("<3I", buf, 4)
        payload = _payload(buf, 16, (h, w, z), 1)
        data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, z)
        bad = np.flatnonzero(data.ravel() > 1)
        if bad.size:
            raise FormatError(f"occupancy byte {int(data.ravel()[bad[0]])} is not 0/1", 16 + int(bad[0]))
        return OccupancyGrid(data.copy())
    if magic == _MAGIC_LABEL:
        h, w, z, nc = _unpack("<4I", buf, 4)
        if not 1 <= nc <= IGNORE_LABEL:
            raise FormatError(f"num_classes {nc} out of range", 16)
        payload = _payload(buf, 20, (h, w, z), 1)
        labels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, z)
        bad = np.flatnonzero((labels.ravel() >= nc) & (labels.ravel() != IGNORE_LABEL))
        if bad.size:
            raise FormatError(f"label {int(labels.ravel()[bad[0]])} >= num_classes {nc}", 20 + int(bad[0]))
        return SemanticGrid(labels.copy(), nc)
    raise FormatError(f"bad magic {magic!r}; expected one of VXG1, VXO1, VXL1", 0)


def read_grid(path, expect: type | None = None):
    """Read any of the three grid kinds, dispatching on the magic bytes."""
    buf = Path(path).read_bytes()
    grid = decode_grid(buf)
    if expect is not None and not isinstance(grid, expect):
        raise FormatError(f"{path}: expected a {expect.__name__} file, found {type(grid).__name__}", 0)
    return grid
