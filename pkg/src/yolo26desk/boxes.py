"""Box geometry on plain numpy arrays, with an evaluation counter.

Boxes are ``(x1, y1, x2, y2)`` in pixels. Every pairwise IoU evaluation made
through this module is added to :data:`IOU_COUNTER`, so callers can prove that
a code path never compared boxes.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["IOU_COUNTER", "IouCounter", "box_iou", "pairwise_iou", "pairwise_overlap"]


class IouCounter:
    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


IOU_COUNTER = IouCounter()


def box_iou(a, b, variant: str = "iou") -> float:
    """IoU (or CIoU) of two boxes. Zero-area boxes give IoU 0 without raising."""
    IOU_COUNTER.count += 1
    ax1, ay1, ax2, ay2 = map(float, a)
    bx1, by1, bx2, by2 = map(float, b)
    wa, ha = max(ax2 - ax1, 0.0), max(ay2 - ay1, 0.0)
    wb, hb = max(bx2 - bx1, 0.0), max(by2 - by1, 0.0)
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    union = wa * ha + wb * hb - inter
    iou = inter / union if union > 0 else 0.0
    if variant == "iou":
        return iou
    if variant != "ciou":
        raise ValueError(f"unknown IoU variant {variant!r}")
    if wa * ha <= 0 or wb * hb <= 0:
        return 0.0
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c2 = cw * cw + ch * ch
    rho2 = ((ax1 + ax2 - bx1 - bx2) ** 2 + (ay1 + ay2 - by1 - by2) ** 2) / 4.0
    v = (4.0 / math.pi**2) * (math.atan(wb / hb) - math.atan(wa / ha)) ** 2
    alpha = v / (v - iou + 1.0) if v > 0 else 0.0
    return iou - rho2 / c2 - alpha * v


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(n, 4) x (m, 4) -> (n, m)`` IoU matrix."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    IOU_COUNTER.count += a.shape[0] * b.shape[0]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def pairwise_overlap(a: np.ndarray, b: np.ndarray, threshold: float) -> np.ndarray:
    """``(n, m)`` boolean mask of ``IoU(a_i, b_j) > threshold``, without dividing.

    ``inter / union > t`` is rewritten as ``inter * (1 + t) > t * (area_a + area_b)``.
    Counts ``n * m`` evaluations like :func:`pairwise_iou`.
    """
    IOU_COUNTER.count += a.shape[0] * b.shape[0]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    np.maximum(iw, 0, out=iw)
    np.maximum(ih, 0, out=ih)
    iw *= ih
    iw *= 1.0 + threshold
    return iw > threshold * (area_a[:, None] + area_b[None, :])
