"""Network building blocks, the dual-branch detect head, and the model graph.

Every block reads its tensors from a shared :class:`ParamStore` by dotted name
(``b09.cv2.weight``). The store records which names were read, which is how
tests check that inference never touches the one-to-many projections.

Conv blocks are ``conv + bias + SiLU``; there is no batch normalization.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .archspec import ArchSpec, block_args
from .tensor import Tensor

__all__ = [
    "C2PSA",
    "C3k",
    "C3k2",
    "SPPF",
    "Bottleneck",
    "ConvBlock",
    "Detect",
    "DetectOutputs",
    "Model",
    "PSABlock",
    "ParamStore",
    "load_checkpoint",
    "psa_heads",
    "save_checkpoint",
]

STRIDES = (8, 16, 32)


def _name_key(name: str):
    head, _, rest = name.partition(".")
    if head.startswith("b") and head[1:].isdigit():
        return (int(head[1:]), rest)
    return (10**9, name)


class ParamStore:
    """Named parameter tensors plus read accounting."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, Tensor] = {}
        self.touched: set[str] = set()

    def create(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        self.touched.add(name)
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self) -> list[str]:
        """Names in checkpoint order: block index, then parameter name."""
        return sorted(self._tensors, key=_name_key)

    def items(self):
        return [(n, self._tensors[n]) for n in self.names()]

    def tensors(self) -> list[Tensor]:
        return [self._tensors[n] for n in self.names()]

    def count(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self._tensors.items() if n.startswith(prefix))

    def reset_touched(self):
        self.touched = set()

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for n, arr in state.items():
            t = self._tensors[n]
            if t.shape != arr.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=self.dtype)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


class ConvBlock:
    """Conv2d (padding k//2) + bias, followed by SiLU unless ``act=False``."""

    def __init__(self, store: ParamStore, name: str, c1: int, c2: int, k: int = 1, s: int = 1,
                 act: bool = True, gain: float = 1.0):
        self.store, self.name = store, name
        self.c1, self.c2, self.k, self.s, self.act = c1, c2, k, s, act
        fan_in = c1 * k * k
        # 2.8 ~ 1 / E[silu(z)^2] for z ~ N(0, 1): keeps activations O(1) without normalization
        std = gain * math.sqrt((2.8 if act else 1.0) / fan_in)
        store.create(f"{name}.weight", store.rng.standard_normal((c2, c1, k, k)) * std)
        store.create(f"{name}.bias", np.zeros(c2))

    @property
    def weight(self) -> Tensor:
        return self.store[f"{self.name}.weight"]

    @property
    def bias(self) -> Tensor:
        return self.store[f"{self.name}.bias"]

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, stride=self.s, padding=self.k // 2)
        return y.silu() if self.act else y


class Bottleneck:
    """Two 3x3 convs with an optional residual add."""

    def __init__(self, store, name, c1, c2, shortcut=True, e=0.5):
        c_ = int(c2 * e)
        self.cv1 = ConvBlock(store, f"{name}.cv1", c1, c_, 3)
        self.cv2 = ConvBlock(store, f"{name}.cv2", c_, c2, 3, gain=0.5)
        self.add = shortcut and c1 == c2

    def __call__(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class C3k:
    """CSP unit: two 1x1 branches, one through ``n`` bottlenecks, fused by 1x1."""

    def __init__(self, store, name, c1, c2, n=2, shortcut=True, e=0.5):
        c_ = int(c2 * e)
        self.cv1 = ConvBlock(store, f"{name}.cv1", c1, c_)
        self.cv2 = ConvBlock(store, f"{name}.cv2", c1, c_)
        self.cv3 = ConvBlock(store, f"{name}.cv3", 2 * c_, c2)
        self.m = [Bottleneck(store, f"{name}.m.{i}", c_, c_, shortcut, e=1.0) for i in range(n)]

    def __call__(self, x):
        y = self.cv1(x)
        for b in self.m:
            y = b(y)
        return self.cv3(T.concat([y, self.cv2(x)], axis=1))


def psa_heads(c: int) -> int:
    """Head count for a PSA unit: channels // 64, at least 1, lowered until it divides ``c``."""
    h = max(1, c // 64)
    while c % h:
        h -= 1
    return h


class Attention:
    """Multi-head self-attention over spatial positions, no positional encoding."""

    def __init__(self, store, name, c, heads):
        if c % heads:
            raise ValueError(f"{c} channels not divisible by {heads} heads")
        self.c, self.heads = c, heads
        self.qkv = ConvBlock(store, f"{name}.qkv", c, 3 * c, act=False)
        self.proj = ConvBlock(store, f"{name}.proj", c, c, act=False, gain=0.5)

    def __call__(self, x):
        n, c, h, w = x.shape
        qkv = self.qkv(x)
        q, k, v = T.split(qkv, [c, c, c], axis=1)
        y = T.attention(q, k, v, self.heads)
        return self.proj(y)


class PSABlock:
    """``x + attn(x)`` then ``+ ffn(.)``."""

    def __init__(self, store, name, c, heads=None):
        heads = psa_heads(c) if heads is None else heads
        if c % heads:
            raise ValueError(f"{c} channels not divisible by {heads} heads")
        self.attn = Attention(store, f"{name}.attn", c, heads)
        self.ffn1 = ConvBlock(store, f"{name}.ffn.0", c, 2 * c)
        self.ffn2 = ConvBlock(store, f"{name}.ffn.1", 2 * c, c, act=False, gain=0.5)

    def __call__(self, x):
        x = x + self.attn(x)
        return x + self.ffn2(self.ffn1(x))


class _Seq:
    def __init__(self, *mods):
        self.mods = mods

    def __call__(self, x):
        for m in self.mods:
            x = m(x)
        return x


class C3k2:
    """Split-transform-merge block.

    ``cv1`` makes ``2c`` channels (``c = int(c2 * e)``) split into two halves;
    ``n`` inner units (plain bottlenecks, or C3k units when ``c3k``) are chained
    on the second half and every intermediate is concatenated before the
    ``cv2`` fuse. With ``attn`` each inner unit is followed by a PSABlock.
    """

    def __init__(self, store, name, c1, c2, n=1, c3k=False, e=0.5, attn=False, shortcut=True):
        if e <= 0:
            raise ValueError("C3k2 expansion must be > 0")
        if n < 1:
            raise ValueError("C3k2 repeats must be >= 1")
        if attn and n != 1:
            raise ValueError("C3k2 with attention requires repeats 1")
        self.c = c = int(c2 * e)
        self.cv1 = ConvBlock(store, f"{name}.cv1", c1, 2 * c)
        self.cv2 = ConvBlock(store, f"{name}.cv2", (2 + n) * c, c2)
        self.m = []
        for i in range(n):
            unit = (C3k(store, f"{name}.m.{i}", c, c, 2, shortcut) if c3k
                    else Bottleneck(store, f"{name}.m.{i}", c, c, shortcut))
            if attn:
                unit = _Seq(unit, PSABlock(store, f"{name}.m.{i}.psa", c))
            self.m.append(unit)

    def __call__(self, x):
        y = T.split(self.cv1(x), [self.c, self.c], axis=1)
        for m in self.m:
            y.append(m(y[-1]))
        return self.cv2(T.concat(y, axis=1))


class SPPF:
    """Pooling pyramid (three chained k x k max-pools) with an additive shortcut."""

    def __init__(self, store, name, c1, c2, k=5):
        if c1 != c2:
            raise ValueError(f"SPPF shortcut needs equal channels, got {c1} -> {c2}")
        c_ = c1 // 2
        self.k = k
        self.cv1 = ConvBlock(store, f"{name}.cv1", c1, c_)
        self.cv2 = ConvBlock(store, f"{name}.cv2", 4 * c_, c2, gain=0.5)

    def __call__(self, x):
        y = [self.cv1(x)]
        for _ in range(3):
            y.append(T.maxpool2d(y[-1], self.k))
        return self.cv2(T.concat(y, axis=1)) + x


class C2PSA:
    """Split into halves; the second half runs through ``n`` PSABlocks."""

    def __init__(self, store, name, c1, c2, n=1, e=0.5):
        if c1 != c2:
            raise ValueError("C2PSA needs equal in/out channels")
        self.c = c = int(c1 * e)
        self.cv1 = ConvBlock(store, f"{name}.cv1", c1, 2 * c)
        self.cv2 = ConvBlock(store, f"{name}.cv2", 2 * c, c1)
        self.m = [PSABlock(store, f"{name}.m.{i}", c) for i in range(n)]

    def __call__(self, x):
        a, b = T.split(self.cv1(x), [self.c, self.c], axis=1)
        for m in self.m:
            b = m(b)
        return self.cv2(T.concat([a, b], axis=1))


# ---------------------------------------------------------------------------
# Detect head
# ---------------------------------------------------------------------------


@dataclass
class DetectOutputs:
    """Raw head maps, each ``(N, 4 + class_count, H, W)``; channels 0..3 are l, t, r, b."""

    one2one: list[Tensor]
    one2many: list[Tensor] | None
    strides: tuple[int, ...] = STRIDES

    @property
    def class_count(self) -> int:
        return self.one2one[0].shape[1] - 4


def detect_widths(ch0: int, nc: int, box_floor: int = 16) -> tuple[int, int]:
    """Stem widths for the box and class branches."""
    return max(box_floor, ch0 // 4, 4), max(ch0, min(nc, 100))


class Detect:
    """Three-level head; each level has shared box/class stems and two 1x1 projections,
    ``o2m`` (one-to-many, training only) and ``o2o`` (one-to-one)."""

    def __init__(self, store, name, nc, channels: Iterable[int], strides=STRIDES, img_size=640, box_floor=16):
        channels = list(channels)
        if len(channels) != 3:
            raise ValueError("Detect needs exactly three input maps")
        self.nc, self.strides = nc, tuple(strides)
        c2, c3 = detect_widths(channels[0], nc, box_floor)
        self.levels = []
        for i, (c, s) in enumerate(zip(channels, self.strides)):
            p = f"{name}.l{i}"
            lvl = {
                "box_stem": _Seq(ConvBlock(store, f"{p}.box.0", c, c2, 3), ConvBlock(store, f"{p}.box.1", c2, c2, 3)),
                "cls_stem": _Seq(ConvBlock(store, f"{p}.cls.0", c, c3, 3), ConvBlock(store, f"{p}.cls.1", c3, c3, 3)),
            }
            prior = math.log(5.0 / nc / (img_size / s) ** 2)
            for branch in ("o2m", "o2o"):
                box = ConvBlock(store, f"{p}.box.{branch}", c2, 4, act=False, gain=0.1)
                cls = ConvBlock(store, f"{p}.cls.{branch}", c3, nc, act=False, gain=0.1)
                # Start with boxes two strides wide and a low class prior.
                store._tensors[f"{p}.box.{branch}.bias"].data[:] = 1.0
                store._tensors[f"{p}.cls.{branch}.bias"].data[:] = prior
                lvl[f"box_{branch}"], lvl[f"cls_{branch}"] = box, cls
            self.levels.append(lvl)

    def __call__(self, feats, inference: bool = False) -> DetectOutputs:
        if len(feats) != 3:
            raise ValueError(f"Detect expects 3 maps, got {len(feats)}")
        o2o, o2m = [], []
        for lvl, f in zip(self.levels, feats):
            bf = lvl["box_stem"](f)
            cf = lvl["cls_stem"](f)
            o2o.append(T.concat([lvl["box_o2o"](bf), lvl["cls_o2o"](cf)], axis=1))
            if not inference:
                o2m.append(T.concat([lvl["box_o2m"](bf), lvl["cls_o2m"](cf)], axis=1))
        return DetectOutputs(o2o, None if inference else o2m, self.strides)


# ---------------------------------------------------------------------------
# Model graph
# ---------------------------------------------------------------------------


class Model:
    """Executable network built from a (scaled) :class:`ArchSpec`."""

    def __init__(self, spec: ArchSpec, seed: int = 0, dtype=np.float64, in_channels: int = 3, img_size: int = 640):
        self.spec = spec
        self.store = ParamStore(seed, dtype)
        self.dtype = np.dtype(dtype)
        self.layers = []
        self.out_channels: list[int] = []
        blocks = spec.blocks
        # block index after which each output is no longer needed
        self._last_use = {}
        for b in blocks:
            for s in b.sources:
                self._last_use[s] = b.index
        ch = []
        for b in blocks:
            srcs = b.sources
            c_in = [in_channels if s == -1 else ch[s] for s in srcs]
            name = f"b{b.index:02d}"
            a = block_args(b)
            if b.kind == "Conv":
                layer, c_out = ConvBlock(self.store, name, c_in[0], a["c_out"], a["k"], a["s"]), a["c_out"]
            elif b.kind == "C3k2":
                layer = C3k2(self.store, name, c_in[0], a["c_out"], b.repeats, a["c3k"], a["e"], a["attn"])
                c_out = a["c_out"]
            elif b.kind == "SPPF":
                layer, c_out = SPPF(self.store, name, c_in[0], a["c_out"], a["k"]), a["c_out"]
            elif b.kind == "C2PSA":
                layer, c_out = C2PSA(self.store, name, c_in[0], a["c_out"], b.repeats), a["c_out"]
            elif b.kind == "Upsample":
                layer, c_out = T.upsample_nearest2x, c_in[0]
            elif b.kind == "Concat":
                layer, c_out = (lambda xs: T.concat(xs, axis=1)), sum(c_in)
            elif b.kind == "Detect":
                layer, c_out = Detect(self.store, name, spec.class_count, c_in, img_size=img_size,
                                          box_floor=a["box_floor"]), 0
            else:
                raise ValueError(f"unknown block kind {b.kind}")
            self.layers.append(layer)
            ch.append(c_out)
        self.out_channels = ch

    @property
    def detect(self) -> Detect:
        return self.layers[-1]

    def parameters(self) -> list[Tensor]:
        return self.store.tensors()

    def forward(self, x, inference: bool = False, return_features: bool = False):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        outputs: dict[int, Tensor] = {-1: x}
        feats = []
        y = x
        for b, layer in zip(self.spec.blocks, self.layers):
            srcs = b.sources
            if b.kind == "Detect":
                y = layer([outputs[s] for s in srcs], inference=inference)
            elif b.kind == "Concat":
                y = layer([outputs[s] for s in srcs])
            else:
                y = layer(outputs[srcs[0]])
            if return_features:
                feats.append(y)
            outputs[b.index] = y
            for s in srcs:
                if self._last_use.get(s) == b.index:
                    outputs.pop(s, None)
        return (y, feats) if return_features else y

    __call__ = forward


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"Y26DESK\0"
_VERSION = 1


def save_checkpoint(store: ParamStore, path) -> None:
    """Write parameters as ``(name, shape, little-endian f32 data)`` records.

    Layout: magic, u32 version, u32 record count, then per record
    u32 name length, utf-8 name, u32 ndim, ndim x u32 dims, raw f32 data.
    Records are ordered by block index then parameter name.
    """
    items = store.items()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(items)))
        for name, t in items:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    if not buf.startswith(_MAGIC):
        raise ValueError("not a checkpoint file")
    pos = len(_MAGIC)
    version, count = struct.unpack_from("<II", buf, pos)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos += 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return out
