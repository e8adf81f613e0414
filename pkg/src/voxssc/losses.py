"""Training objectives with analytic gradients w.r.t. their predictions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .grid import IGNORE_LABEL, OccupancyGrid, SemanticGrid, VoxelGrid, voxel_centers

MAX_HAUSDORFF_POINTS = 4096
RATIO_FLOOR = 1e-12  # keeps log() finite for hard-zero ratios


@dataclass(frozen=True, eq=False)
class LossValue:
    value: float
    terms: dict = field(default_factory=dict)
    grad: np.ndarray | None = None

    def report(self) -> str:
        lines = [f"loss={self.value!r}"] + [f"loss.{k}={v!r}" for k, v in self.terms.items()]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class LossConfig:
    lambda_ce: float = 1.0
    lambda_aff: float = 0.5
    lambda_geo: float = 0.1
    spatial_pairing: str = "edges"
    w_threshold: float = 0.1


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, VoxelGrid) else np.asarray(x, dtype=np.float64)


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, SemanticGrid) else np.asarray(x)


def bce_occupancy(logits, targets, with_grad: bool = False) -> LossValue:
    """Mean binary cross-entropy of occupancy logits against 0/1 targets."""
    x = _values(logits)
    if x.ndim == 4:
        if x.shape[-1] != 1:
            raise InvalidArgumentError(f"occupancy logits need one channel, got {x.shape[-1]}")
        x = x[..., 0]
    y = (targets.data if isinstance(targets, OccupancyGrid) else np.asarray(targets)).astype(np.float64)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"logit dims {x.shape} != target dims {y.shape}")
    per_voxel = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    value = float(per_voxel.sum() / n)
    grad = None
    if with_grad:
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        grad = ((sig - y) / n).reshape(_values(logits).shape)
    return LossValue(value, {"bce": value}, grad)


def graph_edges(w, threshold: float = 0.1) -> np.ndarray:
    """Index pairs ``(m, n)``, ``m < n``, whose connection strength reaches ``threshold``."""
    w = np.asarray(w)
    m, n = np.nonzero(np.triu(w >= threshold, k=1))
    return np.stack([m, n], axis=1)


def consecutive_edges(n_nodes: int) -> np.ndarray:
    idx = np.arange(max(n_nodes - 1, 0))
    return np.stack([idx, idx + 1], axis=1)


def continuity_edges(connection, pairing: str = "edges", w_threshold: float = 0.1) -> np.ndarray:
    """Node pairs for :func:`spatial_continuity_loss`.

    ``"edges"`` keeps every pair ``m < n`` whose connection strength is at least
    ``w_threshold``; ``"consecutive"`` pairs ``(j, j + 1)`` in index order.
    """
    w = np.asarray(connection, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise InvalidArgumentError(f"connection matrix must be square, got shape {w.shape}")
    k = len(w)
    if pairing == "consecutive":
        return np.stack([np.arange(k - 1), np.arange(1, k)], axis=1) if k > 1 else np.zeros((0, 2), np.intp)
    if pairing != "edges":
        raise InvalidArgumentError(f"pairing must be 'edges' or 'consecutive', got {pairing!r}")
    m, n = np.triu_indices(k, 1)
    keep = w[m, n] >= w_threshold
    return np.stack([m[keep], n[keep]], axis=1).astype(np.intp)


def spatial_continuity_loss(g_orig, g_trans, edges, with_grad: bool = False) -> LossValue:
    """Mean absolute change of edge lengths between two embeddings of the same nodes.

    The gradient is w.r.t. ``g_trans`` and is zero on edges whose length is
    unchanged or degenerate.
    """
    a = np.asarray(g_orig, dtype=np.float64)
    b = np.asarray(g_trans, dtype=np.float64)
    e = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"node sets differ in shape: {a.shape} vs {b.shape}")
    if e.size and (e.min() < 0 or e.max() >= len(a)):
        raise InvalidArgumentError(f"edge index out of range for {len(a)} nodes")
    if len(e) == 0:
        return LossValue(0.0, {"spatial": 0.0}, np.zeros_like(b) if with_grad else None)
    da = np.linalg.norm(a[e[:, 0]] - a[e[:, 1]], axis=1)
    diff_b = b[e[:, 0]] - b[e[:, 1]]
    db = np.linalg.norm(diff_b, axis=1)
    gap = da - db
    value = float(np.abs(gap).sum() / len(e))
    grad = None
    if with_grad:
        unit = np.where(db[:, None] > 0, diff_b / np.where(db > 0, db, 1.0)[:, None], 0.0)
        coef = (-np.sign(gap) / len(e))[:, None] * unit
        grad = np.zeros_like(b)
        np.add.at(grad, e[:, 0], coef)
        np.add.at(grad, e[:, 1], -coef)
    return LossValue(value, {"spatial": value}, grad)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_semantic(x: np.ndarray, labels: np.ndarray, num_classes: int):
    if x.shape[:3] != labels.shape:
        raise InvalidArgumentError(f"prediction dims {x.shape[:3]} != label dims {labels.shape}")
    if x.shape[-1] != num_classes:
        raise InvalidArgumentError(f"prediction has {x.shape[-1]} channels for {num_classes} classes")
    bad = (labels != IGNORE_LABEL) & (labels >= num_classes)
    if bad.any():
        raise InvalidArgumentError(f"label {int(labels[bad][0])} >= num_classes {num_classes}")


def weighted_ce(logits, labels, class_weights=None, with_grad: bool = False) -> LossValue:
    """Class-weighted cross-entropy, normalized by the summed weight of the evaluated voxels.

    Voxels labelled 255 are skipped. When every evaluated voxel carries weight
    zero the loss is zero.
    """
    x = _values(logits)
    y = _labels(labels)
    c = x.shape[-1]
    _check_semantic(x, y, c)
    w = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if w.shape != (c,):
        raise InvalidArgumentError(f"need {c} class weights, got {w.shape}")
    valid = y != IGNORE_LABEL
    xv = x[valid]
    yv = y[valid].astype(np.intp)
    logp = _log_softmax(xv)
    wy = w[yv]
    norm = wy.sum()
    nll = -logp[np.arange(len(yv)), yv]
    value = float((wy * nll).sum() / norm) if norm > 0 else 0.0
    grad = None
    if with_grad:
        grad = np.zeros_like(x)
        if norm > 0:
            g = np.exp(logp)
            g[np.arange(len(yv)), yv] -= 1.0
            grad[valid] = wy[:, None] * g / norm
    return LossValue(value, {"ce": value}, grad)


def inverse_log_frequency_weights(labels, num_classes: int) -> np.ndarray:
    """``1 / log(1.02 + freq_c)`` from the non-ignored label histogram."""
    y = _labels(labels)
    y = y[y != IGNORE_LABEL]
    counts = np.bincount(y.astype(np.intp), minlength=num_classes)[:num_classes].astype(np.float64)
    freq = counts / max(counts.sum(), 1.0)
    return 1.0 / np.log(1.02 + freq)


def scene_class_affinity(probs, labels, with_grad: bool = False, validate: bool = True) -> LossValue:
    """Scene-class affinity: soft precision, recall and specificity per present class.

    ``loss = -mean_c (log P_c + log R_c + log S_c) / 3`` over classes present
    in the (non-ignored) labels; a ratio whose denominator vanishes is left out.
    ``validate=False`` skips the row-normalization check, which finite
    differencing needs.
    """
    p = _values(probs)
    y = _labels(labels)
    c = p.shape[-1]
    _check_semantic(p, y, c)
    if validate and not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6, rtol=0):
        raise InvalidArgumentError("probabilities must sum to 1 per voxel (within 1e-6)")
    valid = y != IGNORE_LABEL
    pv = p[valid]
    yv = y[valid].astype(np.intp)
    present = np.unique(yv)
    grad_v = np.zeros_like(pv) if with_grad else None
    total = 0.0
    for cls in present:
        pc = pv[:, cls]
        is_c = (yv == cls).astype(np.float64)
        tp = (pc * is_c).sum()
        n_c = is_c.sum()
        n_not = len(yv) - n_c
        s_p = pc.sum()
        term = 0.0
        dterm = np.zeros(len(yv)) if with_grad else None
        if s_p > 0:
            prec = tp / s_p
            term += np.log(max(prec, RATIO_FLOOR))
            if with_grad and prec > RATIO_FLOOR:
                # d log(tp/s_p) = is_c/tp - 1/s_p
                dterm += is_c / tp - 1.0 / s_p
        rec = tp / n_c
        term += np.log(max(rec, RATIO_FLOOR))
        if with_grad and rec > RATIO_FLOOR:
            dterm += is_c / tp
        if n_not > 0:
            spec = ((1.0 - pc) * (1.0 - is_c)).sum() / n_not
            term += np.log(max(spec, RATIO_FLOOR))
            if with_grad and spec > RATIO_FLOOR:
                dterm += -(1.0 - is_c) / (spec * n_not)
        total += term / 3.0
        if with_grad:
            grad_v[:, cls] += dterm / 3.0
    n_present = len(present)
    value = float(-total / n_present) if n_present else 0.0
    grad = None
    if with_grad:
        grad = np.zeros_like(p)
        if n_present:
            grad[valid] = -grad_v / n_present
    return LossValue(value, {"affinity": value}, grad)


def _points(x) -> np.ndarray:
    pts = np.asarray(x, dtype=np.float64)
    return pts.reshape(-1, pts.shape[-1]) if pts.size else pts.reshape(0, 3)


def hausdorff(p, q) -> float:
    """Symmetric Hausdorff distance by exhaustive pairwise comparison."""
    a, b = _points(p), _points(q)
    if len(a) == 0 or len(b) == 0:
        raise InvalidArgumentError("Hausdorff distance needs two non-empty point sets")
    if len(a) > MAX_HAUSDORFF_POINTS or len(b) > MAX_HAUSDORFF_POINTS:
        raise InvalidArgumentError(
            f"point sets of {len(a)} and {len(b)} exceed the exact-evaluation limit {MAX_HAUSDORFF_POINTS}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidArgumentError("point coordinates must be finite")
    diff = a[:, None, :] - b[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def occupied_centers(labels, voxel_size: float = 1.0, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    y = _labels(labels)
    mask = (y != 0) & (y != IGNORE_LABEL)
    return voxel_centers(y.shape, voxel_size, origin)[mask]


def geometric_preservation(pred_labels, gt_labels, voxel_size: float = 1.0) -> float:
    """Hausdorff distance between occupied-voxel centers of two label grids.

    Both empty gives 0; exactly one empty gives the grid diagonal, which bounds
    every center-to-center distance.
    """
    a = occupied_centers(pred_labels, voxel_size)
    b = occupied_centers(gt_labels, voxel_size)
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return float(voxel_size * np.linalg.norm(np.asarray(_labels(gt_labels).shape, dtype=float)))
    return hausdorff(a, b)


def softmax_vjp(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient on softmax outputs back to the logits."""
    return probs * (grad_probs - (probs * grad_probs).sum(axis=-1, keepdims=True))


def total_stage2_loss(logits, labels, class_weights=None, config: LossConfig | None = None,
                      voxel_size: float = 1.0, with_grad: bool = False) -> LossValue:
    """``lambda_ce * WCE + lambda_aff * affinity + lambda_geo * Hausdorff``.

    The Hausdorff term compares argmax occupancy and is piecewise constant, so
    it contributes nothing to the gradient.
    """
    cfg = config or LossConfig()
    x = _values(logits)
    y = _labels(labels)
    terms = {}
    value = 0.0
    grad = np.zeros_like(x) if with_grad else None
    ce = weighted_ce(x, y, class_weights, with_grad=with_grad and cfg.lambda_ce != 0)
    terms["ce"] = ce.value
    value += cfg.lambda_ce * ce.value
    if with_grad and cfg.lambda_ce != 0:
        grad += cfg.lambda_ce * ce.grad
    z = x - x.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    aff = scene_class_affinity(probs, y, with_grad=with_grad and cfg.lambda_aff != 0, validate=False)
    terms["affinity"] = aff.value
    value += cfg.lambda_aff * aff.value
    if with_grad and cfg.lambda_aff != 0:
        grad += cfg.lambda_aff * softmax_vjp(probs, aff.grad)
    ignored = y == IGNORE_LABEL
    pred = np.where(ignored, 0, np.argmax(x, axis=-1)).astype(np.uint8)
    geo = geometric_preservation(pred, np.where(ignored, 0, y), voxel_size) if cfg.lambda_geo else 0.0
    terms["geo"] = geo
    value += cfg.lambda_geo * geo
    return LossValue(float(value), terms, grad)
