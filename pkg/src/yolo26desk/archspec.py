"""Architecture files: parsing, validation, serialization and variant scaling.

An architecture file is a tiny YAML-flavoured text format::

    nc: 3
    scales: [1.0, 1.0, 1024]     # depth_multiple, width_multiple, max_channels
    backbone:
      - [-1, 1, Conv, [64, 3, 2]]
    head:
      - [[-1, -1, -1], 1, Detect, []]

Each row is ``[from, repeats, kind, [args...]]``. ``from`` is an integer or a
flow list of integers; negative values are relative (``-1`` is the previous
block). Only this grammar is accepted; it is not a general YAML reader.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources

__all__ = [
    "BLOCK_KINDS",
    "PRESETS",
    "ArchSpec",
    "ArchSpecError",
    "BlockDef",
    "Diagnostic",
    "ScaleProfile",
    "apply_scale",
    "load_reference",
    "parse_spec",
    "round_to_multiple_of_8",
    "scale_channels",
    "scale_repeats",
    "serialize_spec",
    "validate",
    "with_preset",
]

BLOCK_KINDS = ("Conv", "C3k2", "SPPF", "C2PSA", "Upsample", "Concat", "Detect")

# Kinds whose first argument is an output channel count.
_CHANNEL_KINDS = frozenset({"Conv", "C3k2", "SPPF", "C2PSA"})
# Kinds whose repeats multiply inner units (others must keep repeats == 1).
_REPEATABLE_KINDS = frozenset({"C3k2", "C2PSA"})

REFERENCE_FILE = "yolo26-desk.arch"


class ArchSpecError(ValueError):
    """Raised for syntax errors and invalid architecture graphs."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ScaleProfile:
    depth_multiple: float
    width_multiple: float
    max_channels: int

    def __post_init__(self):
        if not (self.depth_multiple > 0 and self.width_multiple > 0):
            raise ArchSpecError("depth_multiple and width_multiple must be > 0")
        if self.max_channels < 8:
            raise ArchSpecError("max_channels must be >= 8")

    @property
    def is_identity(self) -> bool:
        return self.depth_multiple == 1 and self.width_multiple == 1


# Variant presets. These values are assumptions of this package; no published
# per-variant numbers are reproduced here.
PRESETS = {
    "n": ScaleProfile(0.50, 0.25, 1024),
    "s": ScaleProfile(0.50, 0.50, 1024),
    "m": ScaleProfile(0.50, 1.00, 512),
}


@dataclass(frozen=True)
class BlockDef:
    index: int
    from_: tuple[int, ...]
    repeats: int
    kind: str
    args: tuple = ()
    line: int | None = field(default=None, compare=False)

    @property
    def sources(self) -> tuple[int, ...]:
        """Absolute indices of the input blocks (-1 stands for the network input)."""
        return tuple(self.index + f if f < 0 else f for f in self.from_)


@dataclass(frozen=True)
class ArchSpec:
    class_count: int
    profile: ScaleProfile
    backbone: tuple[BlockDef, ...]
    head: tuple[BlockDef, ...]

    @property
    def blocks(self) -> tuple[BlockDef, ...]:
        return self.backbone + self.head

    @property
    def detect(self) -> BlockDef:
        return self.blocks[-1]


@dataclass(frozen=True)
class Diagnostic:
    index: int
    message: str

    def __str__(self):
        return f"block {self.index}: {self.message}"


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\[)|(\])|(,)|([^\[\],\s]+))")


def _scalar(tok: str, line: int):
    low = tok.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        pass
    if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", tok):
        return tok
    raise ArchSpecError(f"bad token {tok!r}", line)


def _parse_flow(text: str, line: int):
    """Parse a flow list like ``[-1, 1, Conv, [64, 3, 2]]`` into nested lists."""
    pos = 0
    stack: list[list] = []
    result = None
    expect_value = True
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise ArchSpecError(f"unexpected text {text[pos:]!r}", line)
        pos = m.end()
        opening, closing, comma, word = m.groups()
        if result is not None:
            raise ArchSpecError("trailing content after list", line)
        if opening:
            if not expect_value:
                raise ArchSpecError("missing comma", line)
            stack.append([])
            expect_value = True
        elif closing:
            if not stack:
                raise ArchSpecError("unbalanced ']'", line)
            done = stack.pop()
            if stack:
                stack[-1].append(done)
                expect_value = False
            else:
                result = done
        elif comma:
            if expect_value or not stack:
                raise ArchSpecError("unexpected ','", line)
            expect_value = True
        else:
            if not stack:
                raise ArchSpecError("expected '['", line)
            if not expect_value:
                raise ArchSpecError("missing comma", line)
            stack[-1].append(_scalar(word, line))
            expect_value = False
    if stack or result is None:
        raise ArchSpecError("unterminated list", line)
    return result


def _strip_comment(raw: str) -> str:
    i = raw.find("#")
    return raw if i < 0 else raw[:i]


def _row_to_block(row, index: int, line: int) -> BlockDef:
    if not isinstance(row, list) or len(row) != 4:
        raise ArchSpecError("row must be [from, repeats, kind, [args]]", line)
    frm, repeats, kind, args = row
    if isinstance(frm, bool) or not isinstance(frm, (int, list)):
        raise ArchSpecError("'from' must be an integer or list of integers", line)
    frm = frm if isinstance(frm, list) else [frm]
    if not frm or not all(isinstance(f, int) and not isinstance(f, bool) for f in frm):
        raise ArchSpecError("'from' must be an integer or list of integers", line)
    if isinstance(repeats, bool) or not isinstance(repeats, int):
        raise ArchSpecError("repeats must be an integer", line)
    if kind not in BLOCK_KINDS:
        raise ArchSpecError(f"unknown block kind {kind!r}", line)
    if not isinstance(args, list) or any(isinstance(a, list) for a in args):
        raise ArchSpecError("args must be a flat list", line)
    return BlockDef(index, tuple(frm), repeats, kind, tuple(args), line)


def parse_spec(text: str, check: bool = True) -> ArchSpec:
    """Parse and validate architecture file contents.

    Raises :class:`ArchSpecError` with the offending line number on syntax
    errors, and with the block index on graph errors. ``check=False`` skips
    the graph validation so :func:`validate` can report every problem.
    """
    nc = None
    scales = None
    sections: dict[str, list[BlockDef]] = {}
    current = None
    index = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = _strip_comment(raw).rstrip()
        if not body.strip():
            continue
        if "\t" in raw[: len(raw) - len(raw.lstrip())]:
            raise ArchSpecError("tabs are not allowed for indentation", lineno)
        indent = len(body) - len(body.lstrip(" "))
        stripped = body.strip()
        if indent == 0:
            key, sep, value = stripped.partition(":")
            if not sep:
                raise ArchSpecError("expected 'key: value'", lineno)
            key, value = key.strip(), value.strip()
            current = None
            if key == "nc":
                try:
                    nc = int(value)
                except ValueError:
                    raise ArchSpecError("nc must be an integer", lineno) from None
                if nc < 1:
                    raise ArchSpecError("nc must be positive", lineno)
            elif key == "scales":
                triple = _parse_flow(value, lineno)
                if len(triple) != 3 or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in triple
                ):
                    raise ArchSpecError("scales must be [depth, width, max_channels]", lineno)
                if triple[2] != int(triple[2]):
                    raise ArchSpecError("max_channels must be an integer", lineno)
                try:
                    scales = ScaleProfile(float(triple[0]), float(triple[1]), int(triple[2]))
                except ArchSpecError as err:
                    raise ArchSpecError(str(err), lineno) from None
            elif key in ("backbone", "head"):
                if value:
                    raise ArchSpecError(f"'{key}:' must be followed by an indented list", lineno)
                if key in sections:
                    raise ArchSpecError(f"duplicate section {key!r}", lineno)
                if key == "head" and "backbone" not in sections:
                    raise ArchSpecError("'head' must follow 'backbone'", lineno)
                sections[key] = []
                current = key
            else:
                raise ArchSpecError(f"unknown key {key!r}", lineno)
        else:
            if current is None:
                raise ArchSpecError("indented line outside a block list", lineno)
            if indent != 2 or not stripped.startswith("- "):
                raise ArchSpecError("block rows must be '  - [...]' (two-space indent)", lineno)
            row = _parse_flow(stripped[2:], lineno)
            sections[current].append(_row_to_block(row, index, lineno))
            index += 1
    if nc is None:
        raise ArchSpecError("missing 'nc'")
    if scales is None:
        raise ArchSpecError("missing 'scales'")
    if "backbone" not in sections or "head" not in sections:
        raise ArchSpecError("both 'backbone' and 'head' sections are required")
    spec = ArchSpec(nc, scales, tuple(sections["backbone"]), tuple(sections["head"]))
    diags = validate(spec) if check else []
    if diags:
        first = diags[0]
        line = spec.blocks[first.index].line if 0 <= first.index < len(spec.blocks) else None
        raise ArchSpecError(str(first), line)
    return spec


def load_reference() -> ArchSpec:
    """The bundled reference architecture (unscaled)."""
    return parse_spec(reference_text())


def reference_text() -> str:
    return resources.files("yolo26desk.data").joinpath(REFERENCE_FILE).read_text("utf-8")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate(spec: ArchSpec) -> list[Diagnostic]:
    """Check graph invariants; an empty list means the spec is valid."""
    diags = []
    blocks = spec.blocks
    detect_at = [b.index for b in blocks if b.kind == "Detect"]
    if not detect_at:
        diags.append(Diagnostic(len(blocks) - 1, "missing Detect block"))
    elif len(detect_at) > 1:
        for i in detect_at[1:]:
            diags.append(Diagnostic(i, "multiple Detect blocks"))
    if detect_at and detect_at[0] != len(blocks) - 1:
        diags.append(Diagnostic(detect_at[0], "Detect must be the last block"))
    for pos, b in enumerate(blocks):
        if b.index != pos:
            diags.append(Diagnostic(pos, f"index gap: expected {pos}, got {b.index}"))
        if b.repeats < 1:
            diags.append(Diagnostic(b.index, "repeats must be >= 1"))
        for f, src in zip(b.from_, b.sources):
            if f == -1 and b.index == 0:
                continue  # network input
            if src < 0 or src >= b.index:
                diags.append(Diagnostic(b.index, f"dangling reference: block {b.index} references block {src}"))
        n_in = len(b.from_)
        if b.kind == "Detect":
            if n_in != 3:
                diags.append(Diagnostic(b.index, "Detect requires 3 inputs"))
        elif b.kind == "Concat":
            if n_in < 2:
                diags.append(Diagnostic(b.index, "Concat requires >= 2 inputs"))
        elif n_in != 1:
            diags.append(Diagnostic(b.index, f"{b.kind} takes exactly 1 input"))
        diags.extend(_check_args(b))
    return diags


def _check_args(b: BlockDef) -> list[Diagnostic]:
    out = []
    a = b.args
    if b.kind in _CHANNEL_KINDS:
        if not a or isinstance(a[0], bool) or not isinstance(a[0], int) or a[0] < 1:
            out.append(Diagnostic(b.index, f"{b.kind} needs a positive output channel count"))
    if b.kind == "Conv" and len(a) >= 3 and a[2] not in (1, 2):
        out.append(Diagnostic(b.index, "Conv stride must be 1 or 2"))
    if b.kind == "Conv" and len(a) >= 2 and (not isinstance(a[1], int) or a[1] % 2 == 0):
        out.append(Diagnostic(b.index, "Conv kernel must be an odd integer"))
    if b.kind == "C3k2":
        e = a[2] if len(a) > 2 else 0.5
        if isinstance(e, bool) or not isinstance(e, (int, float)) or e <= 0:
            out.append(Diagnostic(b.index, "C3k2 expansion must be > 0"))
        if len(a) > 3 and a[3] is True and b.repeats != 1:
            out.append(Diagnostic(b.index, "C3k2 with attention requires repeats 1"))
    if b.kind == "Detect" and a and (isinstance(a[0], bool) or not isinstance(a[0], int) or a[0] < 1):
        out.append(Diagnostic(b.index, "Detect box width floor must be a positive integer"))
    if b.kind not in _REPEATABLE_KINDS and b.repeats != 1:
        out.append(Diagnostic(b.index, f"{b.kind} does not support repeats > 1"))
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "True" if v else "False"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _fmt_row(b: BlockDef) -> str:
    frm = str(b.from_[0]) if len(b.from_) == 1 else "[" + ", ".join(map(str, b.from_)) + "]"
    args = "[" + ", ".join(_fmt(a) for a in b.args) + "]"
    return f"  - [{frm}, {b.repeats}, {b.kind}, {args}]"


def serialize_spec(spec: ArchSpec) -> str:
    p = spec.profile
    lines = [
        f"nc: {spec.class_count}",
        f"scales: [{_fmt(float(p.depth_multiple))}, {_fmt(float(p.width_multiple))}, {p.max_channels}]",
        "backbone:",
    ]
    lines += [_fmt_row(b) for b in spec.backbone]
    lines.append("head:")
    lines += [_fmt_row(b) for b in spec.head]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


def round_to_multiple_of_8(x: float) -> int:
    """Nearest multiple of 8, ties rounded up, never below 8."""
    return max(8, 8 * math.floor(x / 8 + 0.5))


def scale_channels(c: int, profile: ScaleProfile) -> int:
    return round_to_multiple_of_8(min(c * profile.width_multiple, profile.max_channels))


def scale_repeats(n: int, profile: ScaleProfile) -> int:
    return max(1, math.floor(n * profile.depth_multiple + 0.5))


def with_preset(spec: ArchSpec, preset: str | ScaleProfile) -> ArchSpec:
    profile = PRESETS[preset] if isinstance(preset, str) else preset
    return replace(spec, profile=profile)


def apply_scale(spec: ArchSpec) -> ArchSpec:
    """Apply the spec's profile to channel args and repeats.

    The profile is kept on the result, so scaling twice compounds unless both
    multiples are 1. A C3k2 carrying the attention flag keeps its single
    repeat whatever the depth multiple.
    """
    p = spec.profile

    def scale_block(b: BlockDef) -> BlockDef:
        args = b.args
        if b.kind in _CHANNEL_KINDS:
            args = (scale_channels(args[0], p),) + tuple(args[1:])
        reps = scale_repeats(b.repeats, p) if b.kind in _REPEATABLE_KINDS else b.repeats
        if b.kind == "C3k2" and block_args(b)["attn"]:
            reps = b.repeats
        return replace(b, args=args, repeats=reps)

    return ArchSpec(
        spec.class_count,
        p,
        tuple(scale_block(b) for b in spec.backbone),
        tuple(scale_block(b) for b in spec.head),
    )


def block_args(b: BlockDef) -> dict:
    """Named view of a block's positional args, with defaults filled in."""
    a = list(b.args)
    if b.kind == "Conv":
        return {"c_out": a[0], "k": a[1] if len(a) > 1 else 1, "s": a[2] if len(a) > 2 else 1}
    if b.kind == "C3k2":
        return {
            "c_out": a[0],
            "c3k": bool(a[1]) if len(a) > 1 else False,
            "e": float(a[2]) if len(a) > 2 else 0.5,
            "attn": bool(a[3]) if len(a) > 3 else False,
        }
    if b.kind == "SPPF":
        return {"c_out": a[0], "k": a[1] if len(a) > 1 else 5}
    if b.kind == "C2PSA":
        return {"c_out": a[0]}
    if b.kind == "Upsample":
        return {"scale": a[0] if a else 2}
    if b.kind == "Detect":
        return {"box_floor": a[0] if a else 16}
    return {}
