"""
Reading, scaling and tracing the architecture
==============================================

The bundled architecture file lists every block as ``[from, repeats, kind, args]``.
Here we size it with the nano preset, trace shapes through it and count parameters.
"""

# %%
# Parse and scale
# ---------------
# A preset sets the (depth, width, max_channels) multiples; apply_scale bakes
# them into the block arguments.
import numpy as np

from yolo26desk.archspec import PRESETS, apply_scale, block_args, load_reference, with_preset
from yolo26desk.shapetrace import emit_diagram, trace

spec = load_reference()
print(len(spec.blocks), "blocks,", spec.class_count, "classes")
print("presets:", {k: (p.depth_multiple, p.width_multiple, p.max_channels) for k, p in PRESETS.items()})

nano = apply_scale(with_preset(spec, "n"))
for b in nano.blocks[:11]:
    print(f"{b.index:2d} {b.kind:6s} x{b.repeats} out={block_args(b).get('c_out')}")

# %%
# Shape trace
# -----------
# Every block reports its input and output shapes; the three detect inputs
# sit at strides 8, 16 and 32.
g = trace(nano, (1, 3, 640, 640))
print([(h.channels, h.height, h.width) for h in g.heads], "anchors:", g.anchor_count)
print("parameters:", g.total_params)

# %%
# Parameters per block kind
# -------------------------
by_kind = {}
for b in g.blocks:
    by_kind[b.kind] = by_kind.get(b.kind, 0) + b.params
for k, n in sorted(by_kind.items(), key=lambda kv: -kv[1]):
    print(f"{k:8s} {n:>9,d}  {100 * n / g.total_params:5.1f}%")

# %%
# Diagram
# -------
# The same trace renders as Mermaid (or DOT) text; the first lines look like this.
print("\n".join(emit_diagram(g, "mermaid").splitlines()[:6]))

# %%
# Input sizes must be multiples of 32 so the three strides divide evenly.
for size in (160, 320, 640):
    print(size, trace(nano, (1, 3, size, size)).anchor_count, np.sum([(size // s) ** 2 for s in (8, 16, 32)]))
