"""Inference tail: box decoding, Top-K selection, and a greedy NMS baseline.

:func:`topk_select` ranks anchors by their best class score and never compares
boxes with each other. :func:`nms_oracle` is the classic per-class greedy
suppression kept for comparison; it builds the full pairwise overlap table and
is quadratic by construction.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .assign import Anchors
from .boxes import pairwise_overlap

__all__ = [
    "DecodeConfig",
    "Detection",
    "decode_boxes",
    "decode_outputs",
    "detections_csv",
    "nms_oracle",
    "topk_select",
]


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float
    class_id: int
    anchor: int = -1


@dataclass
class DecodeConfig:
    top_k: int = 300
    score_threshold: float = 0.001

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0 <= self.score_threshold < 1:
            raise ValueError("score_threshold must be in [0, 1)")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def decode_boxes(maps, anchors: Anchors, class_count: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One image's head maps -> ``(boxes (A, 4), scores (A, C))``.

    ``maps`` is a list of ``(4 + C, H, W)`` arrays (a leading batch axis of 1
    is accepted), one per stride, in the same level order as ``anchors``.
    """
    arrs = [np.asarray(getattr(m, "data", m)) for m in maps]
    arrs = [a[0] if a.ndim == 4 else a for a in arrs]
    k = arrs[0].shape[0]
    if k < 5 or any(a.shape[0] != k for a in arrs) or (class_count is not None and k != 4 + class_count):
        raise ValueError(f"head maps must carry 4 + class_count channels, got {[a.shape[0] for a in arrs]}")
    flat = np.concatenate([a.reshape(k, -1) for a in arrs], axis=1).T.astype(np.float64)
    if len(flat) != len(anchors):
        raise ValueError(f"{len(flat)} predictions for {len(anchors)} anchors")
    s = anchors.strides.astype(np.float64)
    cx, cy = anchors.centers[:, 0], anchors.centers[:, 1]
    boxes = np.stack([cx - flat[:, 0] * s, cy - flat[:, 1] * s, cx + flat[:, 2] * s, cy + flat[:, 3] * s], axis=1)
    return boxes, _sigmoid(flat[:, 4:])


def _best_class(boxes: np.ndarray, scores: np.ndarray, threshold: float):
    """Per-anchor best class, filtered by threshold and box validity."""
    cls = np.argmax(scores, axis=1)
    best = scores[np.arange(len(scores)), cls]
    ok = (best >= threshold) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    idx = np.flatnonzero(ok)
    return idx, best[idx], cls[idx]


def _detections(boxes, idx, score, cls) -> list[Detection]:
    rows = np.asarray(boxes, dtype=np.float64)[idx].tolist()
    return [Detection(tuple(b), s, c, i) for b, s, c, i in zip(rows, score.tolist(), cls.tolist(), idx.tolist())]


def topk_select(boxes: np.ndarray, scores: np.ndarray, config: DecodeConfig | None = None) -> list[Detection]:
    """The ``top_k`` anchors with the highest best-class score, highest first.

    Ties go to the lower anchor index. Anchors below ``score_threshold`` or
    with inverted boxes are dropped. Linear in the anchor count apart from
    sorting the final ``top_k`` entries.
    """
    config = config or DecodeConfig()
    idx, best, cls = _best_class(np.asarray(boxes), np.asarray(scores), config.score_threshold)
    k = config.top_k
    if len(idx) > k:
        # keep everything tied with the k-th score so the tie-break stays exact
        kth = np.partition(best, len(best) - k)[len(best) - k]
        keep = best >= kth
        idx, best, cls = idx[keep], best[keep], cls[keep]
    order = np.lexsort((idx, -best))[:k]
    return _detections(boxes, idx[order], best[order], cls[order])


def nms_oracle(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5,
               score_threshold: float = 0.001, block_pairs: int = 1 << 22) -> list[Detection]:
    """Greedy per-class NMS over per-anchor best-class candidates.

    Candidates are visited by descending score (ties: lower anchor); a box is
    dropped if its IoU with an already kept box of the same class exceeds
    ``iou_threshold``. The pairwise table is filled in row blocks of about
    ``block_pairs`` entries. Survivors are returned by descending score.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    idx, best, cls = _best_class(boxes, np.asarray(scores), score_threshold)
    order = np.lexsort((idx, -best))
    idx, best, cls = idx[order], best[order], cls[order]
    kept = np.zeros(len(idx), dtype=bool)
    for c in np.unique(cls):
        members = np.flatnonzero(cls == c)  # already in visiting order
        b = boxes[idx[members]]
        n = len(b)
        alive = np.ones(n, dtype=bool)
        rows = max(1, block_pairs // max(n, 1))
        for r0 in range(0, n, rows):
            r1 = min(n, r0 + rows)
            over = pairwise_overlap(b[r0:r1], b[r0:], iou_threshold)
            for i in range(r0, r1):
                if alive[i]:
                    alive[i + 1:] &= ~over[i - r0, i - r0 + 1:]
        kept[members[alive]] = True
    return _detections(boxes, idx[kept], best[kept], cls[kept])


def decode_outputs(outputs, anchors: Anchors, config: DecodeConfig | None = None, image: int = 0) -> list[Detection]:
    """Top-K detections for one image of a batch, read from the one-to-one maps only."""
    maps = [m.data[image] for m in outputs.one2one]
    boxes, scores = decode_boxes(maps, anchors)
    return topk_select(boxes, scores, config)


def detections_csv(dets, path=None) -> str:
    """Detections as CSV ``x1,y1,x2,y2,score,class``; also written to ``path`` if given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x1", "y1", "x2", "y2", "score", "class"])
    for d in dets:
        w.writerow([f"{v:.4f}" for v in d.box] + [f"{d.score:.6f}", d.class_id])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as f:
            f.write(text)
    return text
