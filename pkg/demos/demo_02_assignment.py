"""
Label assignment and the small-object floor
===========================================

Each object gets many anchors for the one-to-many branch and exactly one for
the one-to-one branch. Objects below 8 px (at 640) are topped up to four anchors.
"""

# %%
# A scene with a tiny object
# --------------------------
import numpy as np

from yolo26desk import tensor as T
from yolo26desk.archspec import apply_scale, load_reference, with_preset
from yolo26desk.assign import AssignConfig, anchors_for_input, apply_stal, assign_one2many, assign_one2one, tal_metric
from yolo26desk.blocks import Model
from yolo26desk.decode import decode_boxes
from yolo26desk.harness import gen_scene

size = 160
scene = gen_scene(3, size, small_objects=True)
print("boxes:\n", scene.boxes, "\nclasses:", scene.classes)

# %%
# Untrained predictions
# ---------------------
# The assigner scores anchors by cls_score^alpha * IoU^beta, inside the box only.
model = Model(apply_scale(with_preset(load_reference(), "n")), seed=0, dtype=np.float32, img_size=size)
anchors = anchors_for_input(size, size)
with T.no_grad():
    out = model(T.Tensor(scene.image[None].astype(np.float32)))
bm, sm = decode_boxes([m.data[0] for m in out.one2many], anchors)
bo, so = decode_boxes([m.data[0] for m in out.one2one], anchors)

cfg = AssignConfig()
metric = tal_metric(sm, bm, scene.boxes, scene.classes, anchors, cfg)
natural = assign_one2many(metric, cfg)
padded = apply_stal(natural, scene.boxes, anchors, cfg, size)
one = assign_one2one(tal_metric(so, bo, scene.boxes, scene.classes, anchors, cfg))

# %%
# Before and after the floor
# --------------------------
thr = cfg.small_threshold(size)
for g, b in enumerate(scene.boxes):
    side = max(b[2] - b[0], b[3] - b[1])
    print(f"gt {g}: side {side:4.0f} small={side < thr} natural={natural.counts()[g]} "
          f"padded={padded.counts()[g]} one2one={one.counts()[g]}")
print("anchors added:", padded.stal_added)
