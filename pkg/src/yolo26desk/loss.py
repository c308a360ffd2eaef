"""Detection loss without distribution bins, plus progressive dual-head weighting.

Per branch the loss is ``box_gain * box + cls_gain * cls`` where ``box`` is the
assignment-weighted mean of ``1 - CIoU`` over matched anchors and ``cls`` is the
mean binary cross-entropy over all anchors and classes against soft targets.
The two branches are mixed by :func:`progloss_weights`, which moves weight from
the one-to-many branch to the one-to-one branch over training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .assign import Anchors, Assignment
from .boxes import box_iou
from .tensor import Tensor

__all__ = [
    "LossBreakdown",
    "LossConfig",
    "ProgLossState",
    "box_loss",
    "ciou_tensor",
    "cls_loss",
    "flatten_maps",
    "iou",
    "progloss_weights",
    "total_loss",
]

_EPS = 1e-9


def iou(a, b, variant: str = "iou") -> float:
    """Scalar IoU or CIoU of two ``(x1, y1, x2, y2)`` boxes."""
    return box_iou(a, b, variant)


def ciou_tensor(pred_cols, target: np.ndarray, variant: str = "ciou") -> Tensor:
    """Differentiable IoU/CIoU between predicted boxes and constant targets.

    ``pred_cols`` is ``(x1, y1, x2, y2)``, four tensors of shape ``(M,)``;
    ``target`` is ``(M, 4)``. Predicted widths are clamped at a tiny positive
    value so inverted boxes have zero area instead of negative area.
    """
    px1, py1, px2, py2 = pred_cols
    dt = px1.dtype
    t = np.asarray(target, dtype=dt)
    tx1, ty1, tx2, ty2 = (np.ascontiguousarray(t[:, i]) for i in range(4))
    tw, th = tx2 - tx1, ty2 - ty1
    pw = T.maximum(px2 - px1, _EPS)
    ph = T.maximum(py2 - py1, _EPS)
    iw = T.maximum(T.minimum(px2, tx2) - T.maximum(px1, tx1), 0.0)
    ih = T.maximum(T.minimum(py2, ty2) - T.maximum(py1, ty1), 0.0)
    inter = iw * ih
    union = pw * ph + (tw * th).astype(dt) - inter + _EPS
    iou_t = inter / union
    if variant == "iou":
        return iou_t
    cw = T.maximum(px2, tx2) - T.minimum(px1, tx1)
    ch = T.maximum(py2, ty2) - T.minimum(py1, ty1)
    c2 = cw * cw + ch * ch + _EPS
    dx = px1 + px2 - (tx1 + tx2)
    dy = py1 + py2 - (ty1 + ty2)
    rho2 = (dx * dx + dy * dy) * 0.25
    ang = np.arctan(tw / th).astype(dt) - T.elementwise("atan", pw / ph)
    v = ang * ang * (4.0 / math.pi**2)
    alpha = v / (v - iou_t + (1.0 + _EPS))
    return iou_t - rho2 / c2 - alpha * v


def _decode_cols(dist: Tensor, centers: np.ndarray, strides: np.ndarray):
    """Distances ``(M, 4)`` in stride units -> box column tensors in pixels."""
    dt = dist.dtype
    cx, cy = centers[:, 0].astype(dt), centers[:, 1].astype(dt)
    s = strides.astype(dt)
    l, t, r, b = (dist[:, i] for i in range(4))
    return (cx - l * s, cy - t * s, cx + r * s, cy + b * s)


def box_loss(pred_dist: Tensor, anchors: Anchors, gt_boxes: np.ndarray, assignment: Assignment,
             variant: str = "ciou") -> Tensor:
    """Weighted mean of ``1 - CIoU`` over matched anchors of one image; 0 if none."""
    pos = assignment.positives
    if len(pos) == 0:
        return Tensor(np.zeros((), dtype=pred_dist.dtype))
    return _box_loss_rows(pred_dist[pos], anchors.centers[pos], anchors.strides[pos],
                          np.asarray(gt_boxes, dtype=np.float64)[assignment.gt_index[pos]],
                          assignment.weights[pos], variant)


def _box_loss_rows(dist_rows: Tensor, centers, strides, targets, weights, variant) -> Tensor:
    cols = _decode_cols(dist_rows, centers, strides)
    q = ciou_tensor(cols, targets, variant)
    w = np.asarray(weights, dtype=dist_rows.dtype)
    return ((1.0 - q) * w).sum() * (1.0 / float(w.sum()))


def cls_targets(n_anchors: int, n_classes: int, assignment: Assignment, gt_classes) -> np.ndarray:
    t = np.zeros((n_anchors, n_classes))
    pos = assignment.positives
    t[pos, np.asarray(gt_classes)[assignment.gt_index[pos]]] = assignment.weights[pos]
    return t


def cls_loss(logits: Tensor, assignment: Assignment, gt_classes) -> Tensor:
    """Mean BCE over anchors x classes; targets are alignment weights at matched class slots."""
    a, c = logits.shape
    return T.bce_with_logits(logits, cls_targets(a, c, assignment, gt_classes)).mean()


@dataclass
class ProgLossState:
    step: int = 0
    total_steps: int = 1
    w_start: tuple[float, float] = (1.0, 0.2)  # (one2many, one2one)
    w_end: tuple[float, float] = (0.2, 1.0)
    schedule: str = "linear"

    def __post_init__(self):
        if min(*self.w_start, *self.w_end) < 0:
            raise ValueError("ProgLoss weights must be non-negative")
        if self.w_end[0] > self.w_start[0] or self.w_end[1] < self.w_start[1]:
            raise ValueError("one2many weight must not grow and one2one weight must not shrink")
        if not math.isclose(sum(self.w_start), sum(self.w_end), rel_tol=0, abs_tol=1e-12):
            raise ValueError("w_start and w_end must have the same sum")
        if self.schedule not in ("linear", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def progloss_weights(state: ProgLossState) -> tuple[float, float]:
    """``(w_o2m, w_o2o)`` at ``state.step``, interpolated from ``w_start`` to ``w_end``."""
    if state.total_steps <= 0 or state.step >= state.total_steps:
        return tuple(state.w_end)
    if state.step <= 0:
        return tuple(state.w_start)
    t = state.step / state.total_steps
    if state.schedule == "cosine":
        t = 0.5 * (1.0 - math.cos(math.pi * t))
    (a0, a1), (b0, b1) = state.w_start, state.w_end
    # clip keeps each weight inside its endpoints; rounding can't break monotonicity
    w0 = min(max(a0 + (b0 - a0) * t, b0), a0)
    w1 = max(min(a1 + (b1 - a1) * t, b1), a1)
    return (w0, w1)


@dataclass
class LossConfig:
    box_gain: float = 7.5
    cls_gain: float = 0.5
    variant: str = "ciou"


@dataclass
class LossBreakdown:
    box_o2m: float
    cls_o2m: float
    box_o2o: float
    cls_o2o: float
    w_o2m: float
    w_o2o: float
    weighted_total: float
    total: Tensor  # on the tape, for backward()


def flatten_maps(maps) -> Tensor:
    """List of ``(N, K, H, W)`` maps -> ``(N, A, K)`` with level-major, row-major anchors."""
    n, k = maps[0].shape[:2]
    flat = T.concat([m.reshape(n, k, m.shape[2] * m.shape[3]) for m in maps], axis=2)
    return flat.transpose(0, 2, 1)


def _branch_loss(maps, anchors, gts, assignments, config: LossConfig) -> tuple[Tensor, Tensor]:
    flat = flatten_maps(maps)
    n, a, k = flat.shape
    rows_n, rows_a, targets, weights = [], [], [], []
    cls_t = np.zeros((n, a, k - 4))
    for i, ((boxes, classes), asg) in enumerate(zip(gts, assignments)):
        pos = asg.positives
        rows_n.append(np.full(len(pos), i))
        rows_a.append(pos)
        targets.append(np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[asg.gt_index[pos]])
        weights.append(asg.weights[pos])
        cls_t[i] = cls_targets(a, k - 4, asg, classes)
    rows_n, rows_a = np.concatenate(rows_n).astype(np.int64), np.concatenate(rows_a).astype(np.int64)
    logits = flat[:, :, 4:]
    lcls = T.bce_with_logits(logits, cls_t).mean()
    if len(rows_a) == 0:
        return Tensor(np.zeros((), dtype=flat.dtype)), lcls
    dist = flat[rows_n, rows_a, 0:4]
    lbox = _box_loss_rows(dist, anchors.centers[rows_a], anchors.strides[rows_a],
                          np.concatenate(targets), np.concatenate(weights), config.variant)
    return lbox, lcls


def total_loss(outputs, gts, assignments, state: ProgLossState, anchors: Anchors,
               config: LossConfig | None = None) -> LossBreakdown:
    """Combine both branches.

    ``gts`` is a per-image list of ``(boxes (G, 4), classes (G,))``;
    ``assignments`` a per-image list of ``(one2many, one2one)`` pairs. Box
    loss is a weighted mean over all matched anchors in the batch.
    """
    config = config or LossConfig()
    w_o2m, w_o2o = progloss_weights(state)
    box_m, cls_m = _branch_loss(outputs.one2many, anchors, gts, [a[0] for a in assignments], config)
    box_o, cls_o = _branch_loss(outputs.one2one, anchors, gts, [a[1] for a in assignments], config)
    gb, gc = config.box_gain, config.cls_gain
    total = (box_m * gb + cls_m * gc) * w_o2m + (box_o * gb + cls_o * gc) * w_o2o
    return LossBreakdown(box_m.item(), cls_m.item(), box_o.item(), cls_o.item(), w_o2m, w_o2o,
                         total.item(), total)
