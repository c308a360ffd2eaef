"""Anchor generation and label assignment.

The task-aligned metric ``score ** alpha * IoU ** beta`` (zero for anchors whose
centre falls outside the ground-truth box) drives two assigners:

* one-to-many: the top-k anchors per object, contested anchors going to the
  object with the higher metric; small objects are then topped up by
  :func:`apply_stal` to a minimum anchor count.
* one-to-one: a global greedy matching over (object, anchor) pairs in
  decreasing metric order, so each object gets at most one anchor.

Ties are always broken towards the lower anchor index, then the lower object
index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import pairwise_iou

__all__ = [
    "AnchorPoint",
    "Anchors",
    "AssignConfig",
    "Assignment",
    "GroundTruth",
    "apply_stal",
    "assign_image",
    "assign_one2many",
    "assign_one2one",
    "make_anchors",
    "tal_metric",
]


@dataclass(frozen=True)
class AnchorPoint:
    cx: float
    cy: float
    stride: int


@dataclass(frozen=True)
class Anchors:
    """Struct-of-arrays anchor set, level-major then row-major."""

    centers: np.ndarray  # (A, 2) pixel centres
    strides: np.ndarray  # (A,)
    level_sizes: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.strides)

    def __getitem__(self, i) -> AnchorPoint:
        return AnchorPoint(float(self.centers[i, 0]), float(self.centers[i, 1]), int(self.strides[i]))


@dataclass(frozen=True)
class GroundTruth:
    box: tuple[float, float, float, float]
    class_id: int

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate ground truth box {self.box}")

    @property
    def max_side(self) -> float:
        x1, y1, x2, y2 = self.box
        return max(x2 - x1, y2 - y1)


def gt_arrays(gts) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.array([g.box for g in gts], dtype=np.float64).reshape(-1, 4)
    classes = np.array([g.class_id for g in gts], dtype=np.int64)
    return boxes, classes


@dataclass
class AssignConfig:
    alpha: float = 1.0
    beta: float = 6.0
    topk_one2many: int = 10
    stal_min_anchors: int = 4
    stal_size_threshold: float = 8.0  # pixels at the 640 reference size
    reference_size: int = 640

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be > 0")
        if self.topk_one2many < 1 or self.stal_min_anchors < 1:
            raise ValueError("topk_one2many and stal_min_anchors must be >= 1")

    def small_threshold(self, input_size: float) -> float:
        return self.stal_size_threshold * input_size / self.reference_size


@dataclass
class Assignment:
    gt_index: np.ndarray  # (A,) int, -1 = background
    weights: np.ndarray  # (A,) alignment weight in [0, 1], 0 for background
    mode: str  # "one2many" | "one2one"
    num_gts: int
    stal_added: int = 0
    added_mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.gt_index >= 0)

    def counts(self) -> np.ndarray:
        """Number of anchors held by each ground truth."""
        gi = self.gt_index
        return np.bincount(gi[gi >= 0], minlength=self.num_gts)

    def anchors_of(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.gt_index == g)


def make_anchors(level_sizes, strides=(8, 16, 32)) -> Anchors:
    """Cell-centre anchors for feature maps of the given ``(H, W)`` sizes."""
    centers, strd = [], []
    for (h, w), s in zip(level_sizes, strides):
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        centers.append(np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], axis=1))
        strd.append(np.full(h * w, s, dtype=np.int64))
    return Anchors(np.concatenate(centers).astype(np.float64), np.concatenate(strd),
                   tuple((int(h), int(w)) for h, w in level_sizes))


def anchors_for_input(height: int, width: int, strides=(8, 16, 32)) -> Anchors:
    return make_anchors([(height // s, width // s) for s in strides], strides)


def centers_inside(centers: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """``(G, A)`` mask of anchor centres strictly inside each ground-truth box."""
    cx, cy = centers[None, :, 0], centers[None, :, 1]
    g = gt_boxes[:, None, :]
    return (cx > g[..., 0]) & (cx < g[..., 2]) & (cy > g[..., 1]) & (cy < g[..., 3])


def tal_metric(cls_scores, pred_boxes, gt_boxes, gt_classes, anchors: Anchors, config: AssignConfig) -> np.ndarray:
    """``(G, A)`` task-aligned metric. ``cls_scores`` are post-sigmoid ``(A, C)``."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    n_anchors = len(anchors)
    if len(gt_boxes) == 0:
        return np.zeros((0, n_anchors))
    scores = np.asarray(cls_scores, dtype=np.float64)[:, gt_classes].T  # (G, A)
    ious = pairwise_iou(gt_boxes, np.asarray(pred_boxes, dtype=np.float64))
    metric = scores**config.alpha * ious**config.beta
    return np.where(centers_inside(anchors.centers, gt_boxes), metric, 0.0)


def _normalized_weights(metric: np.ndarray, gt_index: np.ndarray) -> np.ndarray:
    w = np.zeros(gt_index.shape, dtype=np.float64)
    pos = np.flatnonzero(gt_index >= 0)
    if len(pos):
        g = gt_index[pos]
        peak = metric.max(axis=1)
        w[pos] = metric[g, pos] / peak[g]
    return w


def assign_one2many(metric: np.ndarray, config: AssignConfig) -> Assignment:
    """Top-k positive-metric anchors per object; contested anchors go to the higher metric."""
    metric = np.asarray(metric, dtype=np.float64)
    n_gt, n_anchor = metric.shape
    k = config.topk_one2many
    selected = np.zeros_like(metric, dtype=bool)
    idx = np.arange(n_anchor)
    for g in range(n_gt):
        cand = idx[metric[g] > 0]
        if len(cand) == 0:
            continue
        order = np.lexsort((cand, -metric[g, cand]))
        selected[g, cand[order[:k]]] = True
    gt_index = np.full(n_anchor, -1, dtype=np.int64)
    held = selected.any(axis=0)
    if n_gt:
        best = np.argmax(np.where(selected, metric, -1.0), axis=0)  # first max -> lowest gt index
        gt_index[held] = best[held]
    return Assignment(gt_index, _normalized_weights(metric, gt_index), "one2many", n_gt)


def assign_one2one(metric: np.ndarray) -> Assignment:
    """Greedy bijective matching: repeatedly take the best remaining (object, anchor) pair."""
    metric = np.asarray(metric, dtype=np.float64)
    n_gt, n_anchor = metric.shape
    gt_index = np.full(n_anchor, -1, dtype=np.int64)
    # anchor-major layout so a flat argmax breaks ties by anchor index, then object index
    work = np.where(metric > 0, metric, -np.inf).T.copy()
    for _ in range(n_gt):
        if work.size == 0:
            break
        flat = int(np.argmax(work))
        a, g = divmod(flat, n_gt)
        if not np.isfinite(work[a, g]):
            break
        gt_index[a] = g
        work[a, :] = -np.inf
        work[:, g] = -np.inf
    return Assignment(gt_index, _normalized_weights(metric, gt_index), "one2one", n_gt)


def apply_stal(assignment: Assignment, gt_boxes, anchors: Anchors, config: AssignConfig,
               input_size: float) -> Assignment:
    """Guarantee small objects a minimum number of one-to-many anchors.

    Objects whose longer side is below the scaled size threshold and that hold
    fewer than ``stal_min_anchors`` anchors get the nearest unassigned stride-8
    anchors (by centre distance). Added anchors take the object's smallest
    existing weight, or 1.0 if it had none. Existing matches are never removed.
    """
    if assignment.mode != "one2many":
        raise ValueError("apply_stal expects a one-to-many assignment")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_index = assignment.gt_index.copy()
    weights = assignment.weights.copy()
    added = np.zeros(len(gt_index), dtype=bool)
    thr = config.small_threshold(input_size)
    fine = np.flatnonzero(anchors.strides == 8)
    sides = np.maximum(gt_boxes[:, 2] - gt_boxes[:, 0], gt_boxes[:, 3] - gt_boxes[:, 1])
    for g in range(len(gt_boxes)):
        if sides[g] >= thr:
            continue
        have = np.flatnonzero(gt_index == g)
        need = config.stal_min_anchors - len(have)
        if need <= 0:
            continue
        free = fine[gt_index[fine] < 0]
        if len(free) == 0:
            continue
        cx = 0.5 * (gt_boxes[g, 0] + gt_boxes[g, 2])
        cy = 0.5 * (gt_boxes[g, 1] + gt_boxes[g, 3])
        d2 = (anchors.centers[free, 0] - cx) ** 2 + (anchors.centers[free, 1] - cy) ** 2
        pick = free[np.lexsort((free, d2))[:need]]
        w = weights[have].min() if len(have) else 1.0
        gt_index[pick] = g
        weights[pick] = w
        added[pick] = True
    return Assignment(gt_index, weights, "one2many", assignment.num_gts,
                      assignment.stal_added + int(added.sum()), added)


def assign_image(o2m_scores, o2m_boxes, o2o_scores, o2o_boxes, gt_boxes, gt_classes,
                 anchors: Anchors, config: AssignConfig, input_size: float) -> tuple[Assignment, Assignment]:
    """Both assignments for one image: one-to-many (with STAL) and one-to-one."""
    m_o2m = tal_metric(o2m_scores, o2m_boxes, gt_boxes, gt_classes, anchors, config)
    m_o2o = tal_metric(o2o_scores, o2o_boxes, gt_boxes, gt_classes, anchors, config)
    o2m = apply_stal(assign_one2many(m_o2m, config), gt_boxes, anchors, config, input_size)
    return o2m, assign_one2one(m_o2o)
