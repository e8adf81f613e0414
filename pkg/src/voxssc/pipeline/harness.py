"""Verification harnesses: finite-difference gradient checks and the toy
overfit run that optimizes a free logit grid against a synthetic scene."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import losses, stn
from ..errors import InvalidArgumentError, OptimizationError
from ..grid import SceneSpec, SemanticGrid, generate_scene, toy_sphere_spec
from ..metrics import EvalReport, semantic_miou

FD_STEP = 1e-5
REL_FLOOR = 1e-6  # denominators below this are treated as absolute error
PASS_TOLERANCE = 1e-4


def central_difference(fn, x: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
    """Gradient of scalar ``fn`` at ``x`` by central differences, one entry at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise InvalidArgumentError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


# --- subjects: each draws one random instance and returns [(analytic, numeric), ...]

def _off_lattice(rng, dims, n):
    """Random normalized positions whose fractional voxel coordinate stays in [0.05, 0.95]."""
    cols = []
    for size in dims:
        base = rng.integers(0, size - 1, n)
        frac = rng.uniform(0.05, 0.95, n)
        cols.append(2.0 * (base + frac) / (size - 1) - 1.0)
    return np.stack(cols, axis=-1)


def _check_trilinear(rng):
    dims = tuple(int(v) for v in rng.integers(2, 5, 3))
    c = int(rng.integers(1, 4))
    field = rng.standard_normal(dims + (c,))
    pos = _off_lattice(rng, dims, int(rng.integers(3, 8)))
    up = rng.standard_normal((len(pos), c))
    g_field, g_pos = stn.interpolate_grad(field, pos, up)
    num_field = central_difference(lambda f: float((stn.interpolate(f, pos) * up).sum()), field)
    num_pos = central_difference(lambda p: float((stn.interpolate(field, p) * up).sum()), pos)
    return [(g_field, num_field), (g_pos, num_pos)]


def _check_bce(rng):
    dims = tuple(int(v) for v in rng.integers(1, 5, 3))
    x = 3.0 * rng.standard_normal(dims)
    y = rng.integers(0, 2, dims)
    g = losses.bce_occupancy(x, y, with_grad=True).grad
    return [(g, central_difference(lambda v: losses.bce_occupancy(v, y).value, x))]


def _random_labels(rng, dims, c, ignore_frac=0.15):
    y = rng.integers(0, c, dims).astype(np.uint8)
    y[rng.random(dims) < ignore_frac] = losses.IGNORE_LABEL
    return y


def _check_wce(rng):
    dims = tuple(int(v) for v in rng.integers(1, 4, 3))
    c = int(rng.integers(2, 6))
    x = 2.0 * rng.standard_normal(dims + (c,))
    y = _random_labels(rng, dims, c)
    w = rng.uniform(0.2, 2.0, c)
    g = losses.weighted_ce(x, y, w, with_grad=True).grad
    return [(g, central_difference(lambda v: losses.weighted_ce(v, y, w).value, x))]


def _check_affinity(rng):
    dims = tuple(int(v) for v in rng.integers(2, 4, 3))
    c = int(rng.integers(2, 5))
    logits = rng.standard_normal(dims + (c,))
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    y = _random_labels(rng, dims, c)
    g = losses.scene_class_affinity(p, y, with_grad=True).grad
    num = central_difference(lambda v: losses.scene_class_affinity(v, y, validate=False).value, p)
    return [(g, num)]


def _check_spatial(rng):
    m = int(rng.integers(3, 9))
    a = rng.standard_normal((m, 3))
    mat = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    b = a @ mat.T + 0.2 * rng.standard_normal((m, 3))
    pairs = np.array([(i, j) for i in range(m) for j in range(i + 1, m)])
    edges = pairs[rng.permutation(len(pairs))[: int(rng.integers(1, len(pairs) + 1))]]
    g = losses.spatial_continuity_loss(a, b, edges, with_grad=True).grad
    num = central_difference(lambda v: losses.spatial_continuity_loss(a, v, edges).value, b)
    return [(g, num)]


SUBJECTS = {
    "trilinear_sample": _check_trilinear,
    "bce_occupancy": _check_bce,
    "weighted_ce": _check_wce,
    "scene_class_affinity": _check_affinity,
    "spatial_continuity_loss": _check_spatial,
}


@dataclass
class GradcheckReport:
    subject: str
    trials: int
    max_rel_error: float
    tolerance: float = PASS_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_kv(self) -> str:
        p = f"gradcheck.{self.subject}"
        return (f"{p}.trials={self.trials}\n{p}.max_rel_error={self.max_rel_error:.3e}\n"
                f"{p}.pass={str(self.passed).lower()}\n")


def gradcheck(subject: str, trials: int = 50, seed: int = 0) -> GradcheckReport:
    if subject not in SUBJECTS:
        raise InvalidArgumentError(f"unknown gradcheck subject {subject!r}; valid subjects: {', '.join(SUBJECTS)}")
    if trials < 1:
        raise InvalidArgumentError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        for analytic, numeric in SUBJECTS[subject](rng):
            worst = max(worst, relative_error(analytic, numeric))
    return GradcheckReport(subject, trials, worst)


# --- toy overfit

@dataclass
class OverfitResult:
    losses: list
    report: EvalReport
    class_weights: np.ndarray
    final_logits: np.ndarray = field(repr=False)

    def smoothed(self, window: int = 10) -> np.ndarray:
        return smooth(self.losses, window)


def smooth(values, window: int = 10) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries average what is available."""
    v = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise InvalidArgumentError(f"window must be >= 1, got {window}")
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def overfit_toy(spec: SceneSpec | None = None, steps: int = 500, step_size: float = 1.0,
                config: losses.LossConfig | None = None) -> OverfitResult:
    """Gradient descent on a free ``(H, W, Z, M)`` logit grid, starting from zeros.

    The loss is recorded before each update. Raises :class:`OptimizationError`
    with the step index if the loss stops being finite.
    """
    if steps < 1:
        raise InvalidArgumentError(f"steps must be >= 1, got {steps}")
    if not (math.isfinite(step_size) and step_size >= 0):
        raise InvalidArgumentError(f"step_size must be finite and non-negative, got {step_size}")
    spec = spec or toy_sphere_spec()
    _, gt, _, _ = generate_scene(spec)
    nc = spec.num_classes
    weights = losses.inverse_log_frequency_weights(gt.labels, nc)
    logits = np.zeros(gt.dims + (nc,))
    curve = []
    for step in range(steps):
        lv = losses.total_stage2_loss(logits, gt.labels, weights, config, spec.voxel_size, with_grad=True)
        if not (math.isfinite(lv.value) and np.all(np.isfinite(lv.grad))):
            raise OptimizationError(f"loss diverged ({lv.value})", step=step)
        curve.append(lv.value)
        logits = logits - step_size * lv.grad
    pred = SemanticGrid(np.argmax(logits, axis=-1).astype(np.uint8), nc)
    return OverfitResult(curve, semantic_miou(pred, gt), weights, logits)
