"""Independent brute-force references shared by unit and acceptance tests.

These use plain Python loops and sorting on purpose: they share no code with
the vectorised library paths they check.
"""

import math

import numpy as np

from yolo26desk.assign import AssignConfig, anchors_for_input, apply_stal, assign_one2many, tal_metric


def scalar_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def raster_iou(a, b, step=0.01):
    """IoU by counting pixel-centre samples on a ``step`` grid."""
    lo = min(a[0], b[0], a[1], b[1])
    hi = max(a[2], b[2], a[3], b[3])
    g = np.arange(lo + step / 2, hi, step)
    x, y = np.meshgrid(g, g, indexing="xy")
    ina = (x > a[0]) & (x < a[2]) & (y > a[1]) & (y < a[3])
    inb = (x > b[0]) & (x < b[2]) & (y > b[1]) & (y < b[3])
    return (ina & inb).sum() / (ina | inb).sum()


def tal_oracle(scores, preds, gts, classes, centers, alpha, beta):
    out = np.zeros((len(gts), len(preds)))
    for g, (box, c) in enumerate(zip(gts, classes)):
        for a in range(len(preds)):
            cx, cy = centers[a]
            if box[0] < cx < box[2] and box[1] < cy < box[3]:
                out[g, a] = scores[a][c] ** alpha * scalar_iou(preds[a], box) ** beta
    return out


def one2one_oracle(metric):
    """Greedy over every positive (gt, anchor) pair sorted by metric, then anchor, then gt."""
    pairs = sorted(((-metric[g, a], a, g) for g in range(metric.shape[0]) for a in range(metric.shape[1])
                    if metric[g, a] > 0))
    used_g, used_a, out = set(), set(), {}
    for _, a, g in pairs:
        if a in used_a or g in used_g:
            continue
        used_a.add(a)
        used_g.add(g)
        out[a] = g
    return out


def one2many_oracle(metric, k):
    picks = {}
    for g in range(metric.shape[0]):
        order = sorted((-metric[g, a], a) for a in range(metric.shape[1]) if metric[g, a] > 0)
        for _, a in order[:k]:
            picks.setdefault(a, []).append(g)
    out = {}
    for a, gs in picks.items():
        # highest metric wins, lower gt index on ties
        out[a] = min(gs, key=lambda g: (-metric[g, a], g))
    return out


def random_metric(rng, n_gt, n_anchor, density=0.3, ties=False):
    m = rng.uniform(0, 1, (n_gt, n_anchor)) * (rng.uniform(0, 1, (n_gt, n_anchor)) < density)
    if ties:
        m = np.round(m * 4) / 4
    return m


def stal_scene(seed, size=640):
    """Random objects (some below the small-object threshold) with random predictions."""
    rng = np.random.default_rng(seed)
    anchors = anchors_for_input(size, size)
    n = int(rng.integers(1, 9))
    small = rng.uniform(0, 1, n) < 0.5
    side = np.where(small, rng.uniform(0.5, 7.99, n), rng.uniform(8, 120, n))
    wh = np.stack([side, side * rng.uniform(0.3, 1.0, n)], axis=1)[:, rng.permutation(2)]
    xy = rng.uniform(0, 1, (n, 2)) * (size - wh)
    gts = np.concatenate([xy, xy + wh], axis=1)
    classes = rng.integers(0, 3, n)
    # predictions jitter around boxes two strides wide at each anchor
    c = anchors.centers
    half = anchors.strides[:, None] * rng.uniform(0.3, 2.0, (len(c), 2))
    preds = np.concatenate([c - half, c + half], axis=1)
    scores = rng.uniform(0, 1, (len(c), 3))
    return anchors, gts, classes, preds, scores


def stal_check(seed, config=None):
    """Returns (small gts checked, failures, gts that lost an anchor)."""
    config = config or AssignConfig()
    anchors, gts, classes, preds, scores = stal_scene(seed)
    nat = assign_one2many(tal_metric(scores, preds, gts, classes, anchors, config), config)
    post = apply_stal(nat, gts, anchors, config, 640)
    sides = np.maximum(gts[:, 2] - gts[:, 0], gts[:, 3] - gts[:, 1])
    small = np.flatnonzero(sides < 8)
    counts = post.counts()
    fails = int(np.sum(counts[small] < config.stal_min_anchors))
    lost = sum(1 for g in range(len(gts)) if not set(nat.anchors_of(g)) <= set(post.anchors_of(g)))
    return len(small), fails, lost


def hand_ap(flags, n_gt):
    """AP from TP/FP flags sorted by descending score: sum of recall steps times precision."""
    tp, ap, prev_r = 0, 0.0, 0.0
    for i, f in enumerate(flags, start=1):
        tp += f
        r = tp / n_gt
        ap += (r - prev_r) * (tp / i)
        prev_r = r
    return ap


def log_log_slope(xs, ys):
    lx = [math.log(x) for x in xs]
    ly = [math.log(y) for y in ys]
    mx, my = sum(lx) / len(lx), sum(ly) / len(ly)
    return sum((a - mx) * (b - my) for a, b in zip(lx, ly)) / sum((a - mx) ** 2 for a in lx)


def nms_brute(boxes, scores, iou_threshold, score_threshold):
    """Greedy per-class suppression restated with scalar IoU; returns kept anchor indices in order."""
    cand = []
    for a in range(len(boxes)):
        c = int(np.argmax(scores[a]))
        s = float(scores[a][c])
        b = boxes[a]
        if s >= score_threshold and b[2] > b[0] and b[3] > b[1]:
            cand.append((-s, a, c))
    kept = []
    for _, a, c in sorted(cand):
        if all(kc != c or scalar_iou(boxes[a], boxes[ka]) <= iou_threshold for ka, kc in kept):
            kept.append((a, c))
    return [a for a, _ in kept]


def separated_scene(seed, size=160, n_classes=3):
    """Head maps where each object has exactly one confident anchor and objects do not overlap.

    Returns ``(maps, anchors, object_anchor_ids)``; maps are ``(4 + C, H, W)`` per stride.
    """
    rng = np.random.default_rng(seed)
    anchors = anchors_for_input(size, size)
    a = len(anchors)
    dist = rng.uniform(0.2, 3.0, (a, 4))
    logits = rng.uniform(-14, -8, (a, n_classes))  # sigmoid below 1e-3 everywhere
    n_obj = int(rng.integers(1, 9))
    chosen, boxes = [], []
    for cand in rng.permutation(a):
        if len(chosen) == n_obj:
            break
        cx, cy = anchors.centers[cand]
        s = anchors.strides[cand]
        d = rng.uniform(0.3, 1.5, 4)
        box = (cx - d[0] * s, cy - d[1] * s, cx + d[2] * s, cy + d[3] * s)
        if all(scalar_iou(box, b) < 0.3 for b in boxes):
            chosen.append(int(cand))
            boxes.append(box)
            dist[cand] = d
            logits[cand] = -12.0
            logits[cand, rng.integers(n_classes)] = rng.uniform(0, 6)
    flat = np.concatenate([dist, logits], axis=1)
    maps, start = [], 0
    for h, w in anchors.level_sizes:
        maps.append(flat[start : start + h * w].T.reshape(4 + n_classes, h, w).copy())
        start += h * w
    return maps, anchors, chosen
