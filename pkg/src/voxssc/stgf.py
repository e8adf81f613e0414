"""Spatially-transformed graph fusion.

Pipeline of one pass: stack voxel queries with the depth grid, warp every
voxel through its own predicted affine transform, build per-voxel spatial
attributes, cluster them with k-means, connect clusters with a Gaussian
kernel, average features per cluster, re-sample them under each cluster's
representative transform, run a small GCN, and scatter the result back to
the voxels through the inverse transforms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import stn
from .errors import InvalidArgumentError, InvariantError, stage
from .grid import VoxelGrid

W_FLOOR = np.finfo(np.float64).tiny  # keeps connection strengths strictly positive


@dataclass(frozen=True, eq=False)
class SpatialAttributes:
    values: np.ndarray  # (N, 2c + 3), voxels in lexicographic order
    alpha: float
    beta: float
    gamma: float
    dims: tuple[int, int, int]


@dataclass(frozen=True, eq=False)
class KMeansResult:
    assignments: np.ndarray  # (N,) int
    centroids: np.ndarray  # (K, D)
    inertia_history: list[float]
    n_iter: int
    converged: bool

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


@dataclass(frozen=True, eq=False)
class GcnParams:
    weights: tuple  # one (in, out) matrix per layer

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        if not ws:
            raise InvalidArgumentError("GCN needs at least one layer")
        for a, b in zip(ws, ws[1:]):
            if a.shape[1] != b.shape[0]:
                raise InvalidArgumentError(f"GCN layer dims do not chain: {a.shape} then {b.shape}")
        if not all(np.all(np.isfinite(w)) for w in ws):
            raise InvalidArgumentError("GCN weights must be finite")
        object.__setattr__(self, "weights", ws)

    @property
    def layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def identity(cls, dim: int, layers: int = 1) -> "GcnParams":
        return cls(tuple(np.eye(dim) for _ in range(layers)))

    @classmethod
    def random(cls, in_dim: int, out_dim: int, layers: int, rng, hidden: int | None = None) -> "GcnParams":
        hidden = hidden or out_dim
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        return cls(tuple(rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(dims, dims[1:])))


@dataclass(frozen=True, eq=False)
class ClusterGraph:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    connection: np.ndarray
    cluster_features: np.ndarray
    aligned_features: np.ndarray
    fused_features: np.ndarray
    thetas: np.ndarray  # representative (K, 12)
    node_positions: np.ndarray  # mean normalized voxel position per cluster
    inertia_history: list = field(default_factory=list)

    def transformed_positions(self) -> np.ndarray:
        return stn.apply_params(self.thetas, self.node_positions)


@dataclass(frozen=True)
class StgfConfig:
    k: int = 0  # 0 selects max(2, round(N / 64))
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    sigma: float = 0.0  # 0 selects the median pairwise centroid distance
    gcn_layers: int = 1
    seed: int = 0
    max_iter: int = 100

    def resolve_k(self, n_voxels: int) -> int:
        k = self.k if self.k > 0 else max(2, int(round(n_voxels / 64)))
        return min(k, n_voxels)


@dataclass(frozen=True, eq=False)
class StgfResult:
    output: VoxelGrid
    warped: VoxelGrid
    voxel_thetas: np.ndarray  # (N, 12)
    graph: ClusterGraph


def _values(grid) -> np.ndarray:
    return grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=np.float64)


def stack_depth(q: VoxelGrid, d) -> VoxelGrid:
    """Concatenate per-voxel features, query channels first."""
    dv = _values(d)
    if dv.shape[:3] != q.dims:
        raise InvalidArgumentError(f"query dims {q.dims} != depth dims {dv.shape[:3]}")
    return q.with_data(np.concatenate([q.data, dv], axis=-1))


_FACE_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def neighbor_mean(qp, at) -> np.ndarray:
    """Mean of the in-bounds face neighbors of voxel ``at``."""
    values = _values(qp)
    dims = values.shape[:3]
    at = tuple(int(a) for a in at)
    if len(at) != 3 or any(not 0 <= a < n for a, n in zip(at, dims)):
        raise InvalidArgumentError(f"voxel index {at} out of bounds for dims {dims}")
    acc = np.zeros(values.shape[-1])
    count = 0
    for off in _FACE_OFFSETS:
        nb = tuple(a + o for a, o in zip(at, off))
        if all(0 <= b < n for b, n in zip(nb, dims)):
            acc = acc + values[nb]
            count += 1
    return acc / count if count else values[at].copy()


def neighbor_mean_grid(values: np.ndarray) -> np.ndarray:
    """:func:`neighbor_mean` for every voxel at once."""
    values = np.asarray(values, dtype=np.float64)
    acc = np.zeros_like(values)
    count = np.zeros(values.shape[:3] + (1,))
    for ax in range(3):
        n = values.shape[ax]
        if n < 2:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax], hi[ax] = slice(0, n - 1), slice(1, n)
        lo, hi = tuple(lo), tuple(hi)
        acc[lo] += values[hi]
        count[lo] += 1
        acc[hi] += values[lo]
        count[hi] += 1
    return np.where(count > 0, acc / np.maximum(count, 1), values)


def spatial_attributes(qp, alpha: float = 1.0, beta: float = 1.0, gamma: float = 1.0) -> SpatialAttributes:
    """Per voxel ``[alpha * q', beta * coords01, gamma * neighbor_mean(q')]``."""
    for name, val in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
        if not (np.isfinite(val) and val >= 0):
            raise InvalidArgumentError(f"{name} must be finite and non-negative, got {val}")
    values = _values(qp)
    dims = values.shape[:3]
    coords = np.stack(np.meshgrid(*[np.arange(n) / max(n - 1, 1) for n in dims], indexing="ij"), -1)
    attrs = np.concatenate([alpha * values, beta * coords, gamma * neighbor_mean_grid(values)], axis=-1)
    return SpatialAttributes(attrs.reshape(-1, attrs.shape[-1]), float(alpha), float(beta), float(gamma),
                             tuple(dims))


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = _sqdist(x, x[chosen[0]][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(free[rng.integers(len(free))])
        chosen.append(idx)
        d2 = np.minimum(d2, _sqdist(x, x[idx][None])[:, 0])
    return x[chosen].copy()


def _cluster_means(x: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray:
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, assign, x)
    counts = np.bincount(assign, minlength=k)
    return sums / counts[:, None]


def kmeans_cluster(attrs, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's k-means with seeded k-means++ initialisation.

    Ties go to the lowest cluster index. An empty cluster takes the point
    farthest from its centroid (among clusters with more than one member).
    """
    x = attrs.values if isinstance(attrs, SpatialAttributes) else np.asarray(attrs, dtype=np.float64)
    x = x.reshape(len(x), -1)
    n = len(x)
    k = int(k)
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    prev = None
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sqdist(x, centroids)
        assign = np.argmin(d2, axis=1)
        counts = np.bincount(assign, minlength=k)
        for m in np.flatnonzero(counts == 0):
            own = d2[np.arange(n), assign]
            own = np.where(counts[assign] > 1, own, -1.0)
            p = int(np.argmax(own))
            counts[assign[p]] -= 1
            assign[p] = m
            counts[m] = 1
            centroids[m] = x[p]
            d2[:, m] = _sqdist(x, x[p][None])[:, 0]
        history.append(float(d2[np.arange(n), assign].sum()))
        if prev is not None and np.array_equal(assign, prev):
            converged = True
            break
        prev = assign
        centroids = _cluster_means(x, assign, k)
    return KMeansResult(assign, centroids, history, it, converged)


def connection_matrix(centroids, sigma: float | None = None) -> np.ndarray:
    """Gaussian-kernel connection strengths between cluster centers."""
    c = np.asarray(centroids, dtype=np.float64)
    c = c.reshape(len(c), -1)
    if len(c) < 1:
        raise InvalidArgumentError("need at least one centroid")
    if not np.all(np.isfinite(c)):
        raise InvalidArgumentError("centroids must be finite")
    d2 = _sqdist(c, c)
    if sigma is None or sigma == 0:
        iu = np.triu_indices(len(c), 1)
        sigma = float(np.median(np.sqrt(d2[iu]))) if len(c) > 1 else 1.0
        if sigma == 0:
            sigma = 1.0
    elif not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    w = np.maximum(np.exp(-d2 / (2.0 * sigma ** 2)), W_FLOOR)
    w = 0.5 * (w + w.T)
    np.fill_diagonal(w, 1.0)
    return w


def fuse_cluster_features(qp, assignments, k: int | None = None) -> np.ndarray:
    """Mean member feature per cluster, ``(K, c)``."""
    values = _values(qp)
    x = values.reshape(-1, values.shape[-1])
    assign = np.asarray(assignments).reshape(-1)
    if len(assign) != len(x):
        raise InvalidArgumentError(f"{len(assign)} assignments for {len(x)} voxels")
    k = int(assign.max()) + 1 if k is None else int(k)
    counts = np.bincount(assign, minlength=k)
    if np.any(counts == 0):
        raise InvariantError(f"cluster {int(np.flatnonzero(counts == 0)[0])} is empty")
    return _cluster_means(x, assign, k)


def representative_thetas(thetas, assignments, k: int) -> np.ndarray:
    """Element-wise mean of member transform parameters, re-regularized."""
    thetas = np.asarray(thetas, dtype=np.float64).reshape(-1, 12)
    return stn.regularize_params(_cluster_means(thetas, np.asarray(assignments).reshape(-1), k))


def cluster_field(cluster_values, assignments, dims) -> np.ndarray:
    """Grid holding each voxel's cluster value, ``dims + (c,)``."""
    cluster_values = np.asarray(cluster_values, dtype=np.float64)
    return cluster_values[np.asarray(assignments).reshape(-1)].reshape(tuple(dims) + (cluster_values.shape[-1],))


def align_cluster_features(f_c, thetas, assignments, qp) -> np.ndarray:
    """Re-sample the cluster-feature field under each cluster's representative transform.

    ``F*_m`` is the mean over member voxels ``v`` of the field sampled at
    ``Theta_m(p_v)``. With identity transforms this returns ``f_c`` exactly.
    """
    f_c = np.asarray(f_c, dtype=np.float64)
    dims = _values(qp).shape[:3]
    assign = np.asarray(assignments).reshape(-1)
    k = len(f_c)
    rep = representative_thetas(thetas, assign, k)
    lattice = stn.normalized_lattice(dims).reshape(-1, 3)
    pos = stn.apply_params(rep[assign], lattice)
    samples = stn.interpolate(cluster_field(f_c, assign, dims), pos)
    return _cluster_means(samples, assign, k)


def normalized_adjacency(w: np.ndarray) -> np.ndarray:
    a = np.asarray(w, dtype=np.float64) + np.eye(len(w))
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def gcn_forward(f_star, w, params: GcnParams) -> np.ndarray:
    """``F <- act(A_hat F W_l)`` per layer; ReLU between layers, none on the last."""
    f = np.asarray(f_star, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(f), len(f)):
        raise InvalidArgumentError(f"connection matrix {w.shape} does not match {len(f)} nodes")
    if f.shape[1] != params.in_dim:
        raise InvalidArgumentError(f"GCN expects {params.in_dim}-dim node features, got {f.shape[1]}")
    a_hat = normalized_adjacency(w)
    for i, weight in enumerate(params.weights):
        f = a_hat @ f @ weight
        if i < params.layers - 1:
            f = np.maximum(f, 0.0)
    return f


def backproject_features(f_prime, assignments, thetas, like) -> VoxelGrid:
    """Scatter node features back to voxels through the inverse representative transforms.

    ``thetas`` are the per-voxel transforms; ``like`` supplies the output dims
    and metadata. Each voxel samples the
    node-feature field at ``Theta_m^-1(p_v)`` for its own cluster ``m``.
    """
    f_prime = np.asarray(f_prime, dtype=np.float64)
    dims = like.dims
    assign = np.asarray(assignments).reshape(-1)
    k = len(f_prime)
    rep = representative_thetas(thetas, assign, k)
    inv = stn.invert_params(rep)
    lattice = stn.normalized_lattice(dims).reshape(-1, 3)
    pos = stn.apply_params(inv[assign], lattice)
    out = stn.interpolate(cluster_field(f_prime, assign, dims), pos)
    return VoxelGrid(out.reshape(tuple(dims) + (f_prime.shape[1],)), like.voxel_size, like.origin)


def warp_voxels(qs: VoxelGrid, thetas: np.ndarray) -> VoxelGrid:
    """Sample the stacked grid at each voxel's own transformed position."""
    lattice = stn.normalized_lattice(qs.dims).reshape(-1, 3)
    pos = stn.apply_params(thetas, lattice)
    return qs.with_data(stn.interpolate(qs.data, pos).reshape(qs.data.shape))


def stgf_apply(q: VoxelGrid, d, config: StgfConfig, locnet: stn.LocNetParams, gcn: GcnParams) -> StgfResult:
    with stage("stack"):
        qs = stack_depth(q, d)
    n = int(np.prod(qs.dims))
    with stage("locnet"):
        thetas = stn.locnet_forward_batch(qs.data.reshape(n, -1), locnet)
    with stage("warp"):
        qp = warp_voxels(qs, thetas)
    with stage("attributes"):
        attrs = spatial_attributes(qp, config.alpha, config.beta, config.gamma)
    with stage("cluster"):
        k = config.resolve_k(n)
        km = kmeans_cluster(attrs, k, config.seed, config.max_iter)
        w = connection_matrix(km.centroids, config.sigma or None)
    with stage("fuse"):
        f_c = fuse_cluster_features(qp, km.assignments, k)
    with stage("align"):
        rep = representative_thetas(thetas, km.assignments, k)
        f_star = align_cluster_features(f_c, thetas, km.assignments, qp)
    with stage("gcn"):
        f_prime = gcn_forward(f_star, w, gcn)
    with stage("backproject"):
        out = backproject_features(f_prime, km.assignments, thetas, q)
    lattice = stn.normalized_lattice(qs.dims).reshape(-1, 3)
    graph = ClusterGraph(k=k, assignments=km.assignments, centroids=km.centroids, connection=w,
                         cluster_features=f_c, aligned_features=f_star, fused_features=f_prime,
                         thetas=rep, node_positions=_cluster_means(lattice, km.assignments, k),
                         inertia_history=km.inertia_history)
    return StgfResult(output=out, warped=qp, voxel_thetas=thetas, graph=graph)
