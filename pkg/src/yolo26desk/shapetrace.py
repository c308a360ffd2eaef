"""Static shape inference and parameter counting over an architecture spec.

Shape rules: Conv with stride 2 halves H and W (padding ``k // 2``), stride 1
keeps them; C3k2, C2PSA and SPPF keep H and W; Upsample doubles them; Concat
sums channels of equally sized maps; Detect consumes three maps at strides
8, 16 and 32.

Parameter counts use closed-form formulas (kernels + biases, attention
projections included), written independently of :mod:`yolo26desk.blocks`:

* ``conv(c1, c2, k) = c2*c1*k*k + c2``
* ``bottleneck(c1, c2, e) = conv(c1, int(c2*e), 3) + conv(int(c2*e), c2, 3)``
* ``c3k(c1, c2) = 2*conv(c1, h, 1) + conv(2h, c2, 1) + 2*bottleneck(h, h, 1)`` with ``h = int(c2/2)``
* ``psa(c) = conv(c, 3c, 1) + conv(c, c, 1) + conv(c, 2c, 1) + conv(2c, c, 1)``
* ``c3k2(c1, c2, n, c3k, e, attn) = conv(c1, 2h, 1) + conv((2+n)h, c2, 1) + n*(unit(h) + attn*psa(h))``
  with ``h = int(c2*e)`` and ``unit`` a C3k or a ``bottleneck(h, h, 0.5)``
* ``sppf(c1, c2) = conv(c1, c1//2, 1) + conv(4*(c1//2), c2, 1)``
* ``c2psa(c, n) = conv(c, 2h, 1) + conv(2h, c, 1) + n*psa(h)`` with ``h = int(c/2)``
* detect, per level with input ``c``: box stem ``conv(c, w2, 3) + conv(w2, w2, 3)``,
  class stem ``conv(c, w3, 3) + conv(w3, w3, 3)``, and two copies (o2m, o2o) of
  ``conv(w2, 4, 1) + conv(w3, nc, 1)``; ``w2 = max(16, c0//4, 4)``,
  ``w3 = max(c0, min(nc, 100))`` where ``c0`` is the first level's channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .archspec import ArchSpec, block_args

__all__ = [
    "BlockTrace",
    "ShapeError",
    "TensorShape",
    "TracedGraph",
    "anchor_count",
    "emit_diagram",
    "param_count_formula",
    "trace",
    "trace_report",
]


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class TensorShape:
    batch: int
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.batch, self.channels, self.height, self.width) < 1:
            raise ShapeError(f"all dimensions must be >= 1, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.batch, self.channels, self.height, self.width)

    def __str__(self):
        return "x".join(map(str, self.as_tuple()))


@dataclass
class BlockTrace:
    index: int
    kind: str
    repeats: int
    sources: tuple[int, ...]
    inputs: list[TensorShape]
    output: TensorShape | None
    params: int
    stride: int


@dataclass
class TracedGraph:
    input: TensorShape
    blocks: list[BlockTrace] = field(default_factory=list)
    heads: list[TensorShape] = field(default_factory=list)
    head_strides: list[int] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(b.params for b in self.blocks)

    @property
    def anchor_count(self) -> int:
        return sum(h.height * h.width for h in self.heads)


def _conv(c1, c2, k):
    return c2 * c1 * k * k + c2


def _bottleneck(c1, c2, e):
    h = int(c2 * e)
    return _conv(c1, h, 3) + _conv(h, c2, 3)


def _c3k(c1, c2, n=2):
    h = int(c2 * 0.5)
    return 2 * _conv(c1, h, 1) + _conv(2 * h, c2, 1) + n * _bottleneck(h, h, 1.0)


def _psa(c):
    return _conv(c, 3 * c, 1) + _conv(c, c, 1) + _conv(c, 2 * c, 1) + _conv(2 * c, c, 1)


def param_count_formula(kind: str, c_in: list[int], c_out: int, repeats: int, args: dict, nc: int = 0) -> int:
    """Closed-form parameter count for one block."""
    if kind == "Conv":
        return _conv(c_in[0], c_out, args["k"])
    if kind == "C3k2":
        h = int(c_out * args["e"])
        unit = _c3k(h, h) if args["c3k"] else _bottleneck(h, h, 0.5)
        if args["attn"]:
            unit += _psa(h)
        return _conv(c_in[0], 2 * h, 1) + _conv((2 + repeats) * h, c_out, 1) + repeats * unit
    if kind == "SPPF":
        h = c_in[0] // 2
        return _conv(c_in[0], h, 1) + _conv(4 * h, c_out, 1)
    if kind == "C2PSA":
        h = int(c_in[0] * 0.5)
        return _conv(c_in[0], 2 * h, 1) + _conv(2 * h, c_in[0], 1) + repeats * _psa(h)
    if kind == "Detect":
        c0 = c_in[0]
        w2, w3 = max(args.get("box_floor", 16), c0 // 4, 4), max(c0, min(nc, 100))
        total = 0
        for c in c_in:
            total += _conv(c, w2, 3) + _conv(w2, w2, 3) + _conv(c, w3, 3) + _conv(w3, w3, 3)
            total += 2 * (_conv(w2, 4, 1) + _conv(w3, nc, 1))
        return total
    return 0


def trace(spec: ArchSpec, input_shape: TensorShape | tuple[int, int, int, int],
          strict_strides: bool = True) -> TracedGraph:
    """Propagate shapes through ``spec`` (already scaled) from ``input_shape``.

    With ``strict_strides`` the Detect inputs must sit at strides 8, 16, 32;
    turn it off to trace toy graphs that only exercise the shape rules.
    """
    if not isinstance(input_shape, TensorShape):
        input_shape = TensorShape(*input_shape)
    if input_shape.channels != 3:
        raise ShapeError(f"input must have 3 channels, got {input_shape.channels}")
    if input_shape.height % 32 or input_shape.width % 32:
        raise ShapeError(f"input size {input_shape.height}x{input_shape.width} is not divisible by 32")
    g = TracedGraph(input_shape)
    shapes: dict[int, TensorShape] = {-1: input_shape}
    strides: dict[int, int] = {-1: 1}
    for b in spec.blocks:
        ins = [shapes[s] for s in b.sources]
        in_strides = [strides[s] for s in b.sources]
        a = block_args(b)
        x = ins[0]
        stride = in_strides[0]
        out = None
        if b.kind == "Conv":
            k, s = a["k"], a["s"]
            p = k // 2
            h = (x.height + 2 * p - k) // s + 1
            w = (x.width + 2 * p - k) // s + 1
            out = TensorShape(x.batch, a["c_out"], h, w)
            stride *= s
        elif b.kind in ("C3k2", "SPPF", "C2PSA"):
            if b.kind in ("SPPF", "C2PSA") and a["c_out"] != x.channels:
                raise ShapeError(
                    f"block {b.index}: {b.kind} needs equal in/out channels, got {x.channels} -> {a['c_out']}"
                )
            out = TensorShape(x.batch, a["c_out"], x.height, x.width)
        elif b.kind == "Upsample":
            out = TensorShape(x.batch, x.channels, 2 * x.height, 2 * x.width)
            stride //= 2
        elif b.kind == "Concat":
            for other in ins[1:]:
                if (other.batch, other.height, other.width) != (x.batch, x.height, x.width):
                    raise ShapeError(f"block {b.index}: Concat shape mismatch {x} vs {other}")
            out = TensorShape(x.batch, sum(i.channels for i in ins), x.height, x.width)
        elif b.kind == "Detect":
            if strict_strides and in_strides != [8, 16, 32]:
                raise ShapeError(f"block {b.index}: Detect inputs have strides {in_strides}, expected [8, 16, 32]")
            g.heads = list(ins)
            g.head_strides = list(in_strides)
        params = param_count_formula(b.kind, [i.channels for i in ins], a.get("c_out", 0), b.repeats, a,
                                     spec.class_count)
        g.blocks.append(BlockTrace(b.index, b.kind, b.repeats, b.sources, ins, out, params, stride))
        if out is not None:
            shapes[b.index] = out
            strides[b.index] = stride
    return g


def anchor_count(height: int, width: int, strides=(8, 16, 32)) -> int:
    return sum((height // s) * (width // s) for s in strides)


def trace_report(graph: TracedGraph) -> str:
    """Deterministic JSON report (one object per block)."""
    def shp(s):
        return None if s is None else list(s.as_tuple())

    doc = {
        "input": shp(graph.input),
        "blocks": [
            {
                "index": b.index,
                "kind": b.kind,
                "repeats": b.repeats,
                "from": list(b.sources),
                "in": [shp(s) for s in b.inputs],
                "out": shp(b.output),
                "params": b.params,
                "stride": b.stride,
            }
            for b in graph.blocks
        ],
        "heads": [shp(h) for h in graph.heads],
        "head_strides": graph.head_strides,
        "anchors": graph.anchor_count,
        "total_params": graph.total_params,
    }
    return json.dumps(doc, indent=1) + "\n"


def emit_diagram(graph: TracedGraph, fmt: str = "mermaid") -> str:
    """Render the traced graph as Mermaid or Graphviz DOT text."""
    def label(b: BlockTrace) -> str:
        shape = "x".join(map(str, b.output.as_tuple()[1:])) if b.output else "heads"
        return f"{b.index}: {b.kind} n={b.repeats} {shape}"

    edges = []
    for b in graph.blocks:
        for s in b.sources:
            edges.append(("in" if s == -1 else f"b{s}", f"b{b.index}"))
    if fmt == "mermaid":
        lines = ["graph TD", f'  in["input {graph.input}"]']
        lines += [f'  b{b.index}["{label(b)}"]' for b in graph.blocks]
        lines += [f"  {u} --> {v}" for u, v in edges]
    elif fmt == "dot":
        lines = ["digraph arch {", "  rankdir=TB;", f'  in [label="input {graph.input}"];']
        lines += [f'  b{b.index} [label="{label(b)}"];' for b in graph.blocks]
        lines += [f"  {u} -> {v};" for u, v in edges]
        lines.append("}")
    else:
        raise ValueError(f"unknown diagram format {fmt!r}")
    return "\n".join(lines) + "\n"
