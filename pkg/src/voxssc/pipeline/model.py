"""Two-stage forward pass.

Stage 1 refines low-resolution voxel queries with cross-attention against
image features and thresholds an occupancy head into proposals. Stage 2 runs
the spatial-transform graph fusion, geometry-aware self-attention and a
linear semantic head, then upsamples to the output grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import gav, stn
from ..attention import AttentionParams, CameraModel, backproject_pixel, dca_batch
from ..attention import dsa as dsa_attend
from ..errors import InvalidArgumentError, stage
from ..grid import OccupancyGrid, SemanticGrid, VoxelGrid, voxel_centers
from ..stgf import GcnParams, StgfResult, stgf_apply
from .config import PipelineConfig

IMAGE_CHANNELS = 4  # inverse depth, valid mask, row, col


@dataclass(frozen=True, eq=False)
class QueryProposalSet:
    features: np.ndarray  # (N_p, d)
    indices: np.ndarray  # (N_p, 3) low-resolution voxel indices, lexicographic

    def __len__(self) -> int:
        return len(self.features)


@dataclass(frozen=True, eq=False)
class ModelParams:
    queries: np.ndarray  # (h, w, z, d) learned low-resolution voxel queries
    dca: AttentionParams
    occ_weight: np.ndarray  # (d,)
    occ_bias: float
    locnet: stn.LocNetParams
    gcn: GcnParams
    dsa: AttentionParams
    sem_weight: np.ndarray  # (d, M + 1)
    sem_bias: np.ndarray  # (M + 1,)


@dataclass(frozen=True, eq=False)
class ForwardResult:
    stage1_logits: VoxelGrid  # (h, w, z, 1)
    stage2_logits: VoxelGrid  # (H, W, Z, M + 1)
    proposals: QueryProposalSet
    occupancy: OccupancyGrid
    complexity: gav.ComplexityGrid
    resolution: gav.ResolutionGrid
    stgf: StgfResult
    hits: np.ndarray

    def labels(self) -> SemanticGrid:
        y = self.stage2_logits.data
        return SemanticGrid(np.argmax(y, axis=-1).astype(np.uint8), y.shape[-1])


def init_params(config: PipelineConfig, seed: int | None = None) -> ModelParams:
    """Draw every weight from one generator seeded by ``seed`` (default ``config.seed``)."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d = config.stage1.feature_dim
    m1 = config.grid.num_classes
    a = config.attn
    queries = 0.1 * rng.standard_normal(config.low_dims + (d,))
    dca = AttentionParams.random(d, IMAGE_CHANNELS, d, a.d_k, a.n_points, rng, pos_dim=2,
                                 offset_scale=a.offset_scale, query_source=a.query_source)
    occ_weight = rng.standard_normal(d) / np.sqrt(d)
    locnet = stn.LocNetParams.identity(d + 1, config.stgf.locnet_scale, rng)
    gcn = GcnParams.random(d + 1, d, config.stgf.gcn_layers, rng)
    dsa = AttentionParams.random(d, d, d, a.d_k, config.gav.n_points, rng,
                                 offset_scale=a.offset_scale, query_source=a.query_source)
    sem_weight = rng.standard_normal((d, m1)) / np.sqrt(d)
    return ModelParams(queries, dca, occ_weight, 0.0, locnet, gcn, dsa, sem_weight, np.zeros(m1))


def zero_params(config: PipelineConfig) -> ModelParams:
    """All-zero weights; the LocNet keeps its identity bias so transforms stay invertible."""
    p = init_params(config, 0)
    z = np.zeros_like
    return ModelParams(z(p.queries), p.dca.zeros_like(), z(p.occ_weight), 0.0,
                       stn.LocNetParams.identity(p.locnet.in_dim),
                       GcnParams(tuple(z(w) for w in p.gcn.weights)), p.dsa.zeros_like(),
                       z(p.sem_weight), z(p.sem_bias))


def image_features(depth: np.ndarray) -> np.ndarray:
    """Per-pixel ``[1/depth, valid, row, col]`` with row/col in [-1, 1]."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3 and depth.shape[-1] == 1:
        depth = depth[..., 0]
    if depth.ndim != 2:
        raise InvalidArgumentError(f"depth image must be 2-D, got shape {depth.shape}")
    valid = depth > 0
    inv = np.where(valid, 1.0 / np.where(valid, depth, 1.0), 0.0)
    rows = np.broadcast_to(stn.normalized_axis(depth.shape[0])[:, None], depth.shape)
    cols = np.broadcast_to(stn.normalized_axis(depth.shape[1])[None, :], depth.shape)
    return np.stack([inv, valid.astype(np.float64), rows, cols], axis=-1)


def depth_grid(depth: np.ndarray, cam: CameraModel, dims, voxel_size: float,
               origin=(0.0, 0.0, 0.0)) -> VoxelGrid:
    """Splat every valid depth pixel into the voxel it lands in; counts normalized by the maximum."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3 and depth.shape[-1] == 1:
        depth = depth[..., 0]
    if depth.shape != (cam.height, cam.width):
        raise InvalidArgumentError(f"depth image {depth.shape} does not match camera {(cam.height, cam.width)}")
    v, u = np.nonzero(depth > 0)
    counts = np.zeros(tuple(dims), dtype=np.float64)
    if len(u):
        pts = backproject_pixel(u + 0.5, v + 0.5, depth[v, u], cam)
        idx = np.floor((pts - np.asarray(origin)) / voxel_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
        np.add.at(counts, tuple(idx[inside].T), 1.0)
    if counts.max() > 0:
        counts /= counts.max()
    return VoxelGrid(counts[..., None], voxel_size, tuple(origin))


def stage1_proposals(q, m_out) -> QueryProposalSet:
    values = q.data if isinstance(q, VoxelGrid) else np.asarray(q, dtype=np.float64)
    mask = m_out.data if isinstance(m_out, OccupancyGrid) else np.asarray(m_out)
    if values.shape[:3] != mask.shape:
        raise InvalidArgumentError(f"query dims {values.shape[:3]} != mask dims {mask.shape}")
    idx = np.argwhere(mask.astype(bool))
    return QueryProposalSet(values[tuple(idx.T)], idx)


def _sigmoid(x):
    return gav._sigmoid(np.asarray(x, dtype=np.float64))


def upsample_nearest(values: np.ndarray, factor: int) -> np.ndarray:
    for ax in range(3):
        values = np.repeat(values, factor, axis=ax)
    return values


def forward(images, depth: VoxelGrid, params: ModelParams, config: PipelineConfig,
            origin=(0.0, 0.0, 0.0)) -> ForwardResult:
    """Run both stages.

    ``images`` is a list of ``(feature_map, camera)`` pairs with
    ``IMAGE_CHANNELS``-channel maps; ``depth`` is the low-resolution depth grid.
    """
    low = config.low_dims
    vs = config.low_voxel_size
    d = config.stage1.feature_dim
    if params.queries.shape != low + (d,):
        raise InvalidArgumentError(f"queries {params.queries.shape} do not match config {low + (d,)}")
    if depth.dims != low:
        raise InvalidArgumentError(f"depth grid dims {depth.dims} != low-resolution dims {low}")
    n = int(np.prod(low))

    with stage("dca"):
        centers = voxel_centers(low, vs, origin).reshape(n, 3)
        q1, hits = dca_batch(params.queries.reshape(n, d), centers, images, params.dca)
    with stage("occupancy"):
        logit1 = q1 @ params.occ_weight + params.occ_bias
        prob1 = _sigmoid(logit1).reshape(low)
        occ = OccupancyGrid((prob1 > config.stage1.threshold).astype(np.uint8))
        proposals = stage1_proposals(q1.reshape(low + (d,)), occ)
    with stage("mask"):
        q2 = np.zeros(low + (d,))
        q2[tuple(proposals.indices.T)] = proposals.features
        q2 = VoxelGrid(q2, vs, tuple(origin))
    with stage("stgf"):
        st = stgf_apply(q2, depth, config.stgf.core(), params.locnet, params.gcn)
        f = st.output.data if config.pipeline.stgf_output == "replace" else st.output.data + q2.data
    with stage("gav"):
        if config.pipeline.gav_source == "stage1":
            source = prob1
        else:
            source = _sigmoid(f[..., 0])
        cx = gav.edge_crossing_count(source, config.gav.iso)
        res = gav.resolution_map(cx, config.gav.c0, config.gav.s)
    with stage("dsa"):
        refined = dsa_attend(VoxelGrid(f, vs, tuple(origin)), res, params.dsa, delta=config.gav.delta_value())
    with stage("head"):
        y = refined.data @ params.sem_weight + params.sem_bias
        y = upsample_nearest(y, config.stage1.factor)
    return ForwardResult(
        stage1_logits=VoxelGrid(logit1.reshape(low + (1,)), vs, tuple(origin)),
        stage2_logits=VoxelGrid(y, config.grid.voxel_size, tuple(origin)),
        proposals=proposals, occupancy=occ, complexity=cx, resolution=res, stgf=st, hits=hits)


def forward_from_depth(depth_image: np.ndarray, cam: CameraModel, params: ModelParams,
                       config: PipelineConfig, origin=(0.0, 0.0, 0.0)) -> ForwardResult:
    """Build image features and the depth grid from one rendered depth image, then run :func:`forward`."""
    with stage("inputs"):
        feats = image_features(depth_image)
        dg = depth_grid(depth_image, cam, config.low_dims, config.low_voxel_size, origin)
    return forward([(feats, cam)], dg, params, config, origin)
