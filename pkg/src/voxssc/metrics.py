"""Scene-completion metrics: occupancy IoU / precision / recall, per-class IoU
and mIoU, and evaluation restricted to increasing forward ranges."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .grid import IGNORE_LABEL, OccupancyGrid, SemanticGrid


@dataclass
class EvalReport:
    iou: float
    precision: float
    recall: float
    per_class_iou: list = field(default_factory=list)
    miou: float = float("nan")
    range_label: str = "full"
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def as_dict(self) -> dict:
        d = {"range": self.range_label, "iou": self.iou, "precision": self.precision,
             "recall": self.recall, "miou": self.miou}
        for i, v in enumerate(self.per_class_iou):
            d[f"class_{i}"] = v
        return d

    def to_kv(self) -> str:
        prefix = f"range.{self.range_label}." if self.range_label != "full" else ""
        return "".join(f"{prefix}{k}={v}\n" for k, v in self.as_dict().items() if k != "range")


def _occ(x) -> np.ndarray:
    if isinstance(x, OccupancyGrid):
        return x.data.astype(bool)
    if isinstance(x, SemanticGrid):
        return x.occupancy().data.astype(bool)
    return np.asarray(x).astype(bool)


def confusion_counts(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None):
    p, g = pred.astype(bool), gt.astype(bool)
    if mask is not None:
        p, g = p[mask], g[mask]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn


def scores_from_counts(tp: int, fp: int, fn: int):
    """IoU is NaN when undefined; precision/recall with an empty denominator are 1 if both sides are empty, else 0."""
    iou = tp / (tp + fp + fn) if tp + fp + fn else float("nan")
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if fn == 0 else 0.0
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 1.0 if fp == 0 else 0.0
    return iou, precision, recall


def occupancy_scores(pred, gt, ignore=None):
    """Return ``(iou, precision, recall)`` over non-ignored voxels."""
    p, g = _occ(pred), _occ(gt)
    if p.shape != g.shape:
        raise InvalidArgumentError(f"prediction dims {p.shape} != ground-truth dims {g.shape}")
    mask = None
    if ignore is not None:
        ignore = np.asarray(ignore, dtype=bool)
        if ignore.shape != p.shape:
            raise InvalidArgumentError(f"ignore mask dims {ignore.shape} != grid dims {p.shape}")
        mask = ~ignore
    return scores_from_counts(*confusion_counts(p, g, mask))


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns prediction."""
    idx = gt.astype(np.int64) * num_classes + pred.astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def semantic_miou(pred: SemanticGrid, gt: SemanticGrid, range_label: str = "full") -> EvalReport:
    """Per-class IoU over semantic classes 1..M-1 and their mean, plus occupancy scores.

    Ground-truth voxels labelled 255 are skipped. Classes absent from both
    prediction and ground truth get NaN and stay out of the mean.
    """
    if pred.dims != gt.dims:
        raise InvalidArgumentError(f"prediction dims {pred.dims} != ground-truth dims {gt.dims}")
    if pred.num_classes != gt.num_classes:
        raise InvalidArgumentError(f"class counts differ: {pred.num_classes} vs {gt.num_classes}")
    nc = gt.num_classes
    valid = gt.labels != IGNORE_LABEL
    if not valid.any():
        raise InvalidArgumentError("no evaluable voxels: ground truth is entirely ignore-labelled")
    p = pred.labels[valid]
    g = gt.labels[valid]
    if np.any(p >= nc):
        raise InvalidArgumentError(f"prediction carries label {int(p[p >= nc][0])} on an evaluable voxel")
    cm = confusion_matrix(p, g, nc)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(union > 0, tp / np.maximum(union, 1), np.nan)[1:]
    defined = per_class[~np.isnan(per_class)]
    miou = float(defined.mean()) if defined.size else float("nan")
    counts = confusion_counts(p != 0, g != 0)
    iou, precision, recall = scores_from_counts(*counts)
    return EvalReport(iou, precision, recall, [float(v) for v in per_class], miou, range_label, *counts)


def _crop(labels: np.ndarray, n: int, axis: int) -> np.ndarray:
    sl = [slice(None)] * 3
    sl[axis] = slice(0, n)
    return labels[tuple(sl)]


def range_voxel_count(r: float, n_axis: int, voxel_size: float) -> int:
    """Number of leading voxels whose center lies closer than ``r`` along the forward axis."""
    centers = (np.arange(n_axis) + 0.5) * voxel_size
    return int(np.count_nonzero(centers < r))


def _range_label(r: float) -> str:
    return f"{r:g}"


def ranged_eval(pred: SemanticGrid, gt: SemanticGrid, ranges, voxel_size: float,
                forward_axis: int = 0) -> list[EvalReport]:
    """Evaluate on crops ``center < r`` along ``forward_axis`` for each range ``r``."""
    if not voxel_size > 0:
        raise InvalidArgumentError(f"voxel_size must be positive, got {voxel_size}")
    if forward_axis not in (0, 1, 2):
        raise InvalidArgumentError(f"forward_axis must be 0, 1 or 2, got {forward_axis}")
    ranges = [float(r) for r in ranges]
    if any(b <= a for a, b in zip(ranges, ranges[1:])):
        raise InvalidArgumentError(f"ranges must be strictly ascending, got {ranges}")
    if pred.dims != gt.dims:
        raise InvalidArgumentError(f"prediction dims {pred.dims} != ground-truth dims {gt.dims}")
    reports = []
    for r in ranges:
        if not (math.isfinite(r) and r >= voxel_size):
            raise InvalidArgumentError(f"range {r} m is smaller than one voxel ({voxel_size} m)")
        n = range_voxel_count(r, gt.dims[forward_axis], voxel_size)
        cp = SemanticGrid(_crop(pred.labels, n, forward_axis), pred.num_classes)
        cg = SemanticGrid(_crop(gt.labels, n, forward_axis), gt.num_classes)
        reports.append(semantic_miou(cp, cg, range_label=_range_label(r)))
    return reports


def parse_ranges(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidArgumentError(f"cannot parse ranges {text!r}; expected e.g. '12.8,25.6,51.2'") from None


def reports_to_csv(reports, num_semantic: int | None = None) -> str:
    m = num_semantic if num_semantic is not None else max((len(r.per_class_iou) for r in reports), default=0)
    cols = ["range", "iou", "precision", "recall", "miou"] + [f"class_{i}" for i in range(m)]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.as_dict())
    return buf.getvalue()
