"""
Top-K decoding next to NMS
==========================

Top-K ranks anchors by score and never compares boxes. When each object has a
single confident prediction, it returns exactly what greedy NMS returns.
"""

# %%
# Same answer on clean predictions
# --------------------------------
import numpy as np

from yolo26desk.assign import anchors_for_input
from yolo26desk.boxes import IOU_COUNTER
from yolo26desk.decode import decode_boxes, nms_oracle, topk_select
from yolo26desk.harness import bench_decode, dense_predictions, fit_slope

rng = np.random.default_rng(1)
anchors = anchors_for_input(160, 160)
flat = np.concatenate([rng.uniform(0.5, 2, (len(anchors), 4)), np.full((len(anchors), 3), -10.0)], axis=1)
for a, c in ((40, 0), (200, 2), (500, 1)):
    flat[a, 4 + c] = 3.0
maps, start = [], 0
for h, w in anchors.level_sizes:
    maps.append(flat[start:start + h * w].T.reshape(7, h, w))
    start += h * w
boxes, scores = decode_boxes(maps, anchors)

IOU_COUNTER.reset()
top = topk_select(boxes, scores)
print("top-k:", [(d.anchor, d.class_id, round(d.score, 3)) for d in top], "IoU calls:", IOU_COUNTER.count)
nms = nms_oracle(boxes, scores)
print("nms:  ", [(d.anchor, d.class_id, round(d.score, 3)) for d in nms], "IoU calls:", IOU_COUNTER.count)

# %%
# Scaling on dense overlaps
# -------------------------
# A short sweep; the acceptance run uses 1e3 to 1e5 with ten repetitions.
b, s = dense_predictions(2000)
print("dense boxes:", b.shape, "best scores:", s.max(axis=1)[:4].round(3))
rows = bench_decode(sizes=(1_000, 4_000, 16_000), repetitions=3)
for r in rows:
    print(f"n={r['n']:6d}  topk {r['topk_ms']:8.2f} ms  nms {r['nms_ms']:9.2f} ms")
ns = [r["n"] for r in rows]
print("slopes:", round(fit_slope(ns, [r["topk_ms"] for r in rows]), 2),
      round(fit_slope(ns, [r["nms_ms"] for r in rows]), 2))
