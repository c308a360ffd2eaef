"""A small dense tensor engine with reverse-mode gradients.

Tensors wrap a contiguous numpy array. Every op that touches a tensor with
``requires_grad`` records its parents and a backward rule; :func:`backward`
walks that graph (the tape) in reverse topological order.

Binary ops never broadcast: operands must have identical shapes, or one side
is a Python scalar. Accumulation order inside each op is fixed, so repeated
runs on the same inputs are bit-identical.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "attention",
    "backward",
    "bce_with_logits",
    "concat",
    "conv2d",
    "elementwise",
    "grad_enabled",
    "maxpool2d",
    "no_grad",
    "softmax",
    "upsample_nearest2x",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor.__rop__

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return self * -1.0

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def silu(self):
        return elementwise("silu", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY = {"silu", "sigmoid", "exp", "log", "atan", "relu", "sqrt"}
_BINARY = {"add", "sub", "mul", "div", "maximum", "minimum"}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Apply an elementwise op. Unary: silu, sigmoid, exp, log, atan, relu, sqrt.

    Binary: add, sub, mul, div, maximum, minimum. Binary operands must share a
    shape; either side may be a Python scalar.
    """
    if kind in _UNARY:
        return _unary(kind, _as_tensor(a))
    if kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {kind!r}")
    a_is_t, b_is_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_is_t and b_is_t:
        _check_same(a, b, kind)
        return _binary(kind, a, b)
    if a_is_t:
        if isinstance(b, np.ndarray):
            return _binary(kind, a, Tensor(b.astype(a.dtype, copy=False)))
        return _binary_scalar(kind, a, float(b), right=True)
    if b_is_t:
        if isinstance(a, np.ndarray):
            return _binary(kind, Tensor(a.astype(b.dtype, copy=False)), b)
        return _binary_scalar(kind, b, float(a), right=False)
    raise TypeError("elementwise needs at least one Tensor operand")


def _unary(kind: str, a: Tensor) -> Tensor:
    x = a.data
    if kind == "sigmoid":
        y = _sigmoid(x)
        return _make(y, (a,), lambda g: (g * y * (1.0 - y),), kind)
    if kind == "silu":
        s = _sigmoid(x)
        y = x * s
        return _make(y, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), kind)
    if kind == "exp":
        y = np.exp(x)
        return _make(y, (a,), lambda g: (g * y,), kind)
    if kind == "log":
        return _make(np.log(x), (a,), lambda g: (g / x,), kind)
    if kind == "atan":
        return _make(np.arctan(x), (a,), lambda g: (g / (1.0 + x * x),), kind)
    if kind == "sqrt":
        y = np.sqrt(x)
        return _make(y, (a,), lambda g: (g * 0.5 / y,), kind)
    if kind == "relu":
        m = x > 0
        return _make(np.where(m, x, 0.0).astype(x.dtype), (a,), lambda g: (g * m,), kind)
    raise AssertionError(kind)


def _binary(kind: str, a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data
    if kind == "add":
        return _make(x + y, (a, b), lambda g: (g, g), kind)
    if kind == "sub":
        return _make(x - y, (a, b), lambda g: (g, -g), kind)
    if kind == "mul":
        return _make(x * y, (a, b), lambda g: (g * y, g * x), kind)
    if kind == "div":
        return _make(x / y, (a, b), lambda g: (g / y, -g * x / (y * y)), kind)
    if kind in ("maximum", "minimum"):
        # Ties route the gradient to the first operand.
        pick_a = x >= y if kind == "maximum" else x <= y
        out = np.where(pick_a, x, y)
        return _make(out, (a, b), lambda g: (g * pick_a, g * ~pick_a), kind)
    raise AssertionError(kind)


def _binary_scalar(kind: str, a: Tensor, c: float, right: bool) -> Tensor:
    """``a (op) c`` when ``right`` else ``c (op) a``."""
    x = a.data
    if kind == "add":
        return _make(x + c, (a,), lambda g: (g,), kind)
    if kind == "sub":
        if right:
            return _make(x - c, (a,), lambda g: (g,), kind)
        return _make(c - x, (a,), lambda g: (-g,), kind)
    if kind == "mul":
        return _make(x * c, (a,), lambda g: (g * c,), kind)
    if kind == "div":
        if right:
            return _make(x / c, (a,), lambda g: (g / c,), kind)
        return _make(c / x, (a,), lambda g: (-g * c / (x * x),), kind)
    if kind in ("maximum", "minimum"):
        keep = x >= c if kind == "maximum" else x <= c
        out = np.where(keep, x, c).astype(x.dtype)
        return _make(out, (a,), lambda g: (g * keep,), kind)
    raise AssertionError(kind)


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    y = x**p
    return _make(y, (a,), lambda g: (g * p * x ** (p - 1),), "pow")


def maximum(a, b) -> Tensor:
    return elementwise("maximum", a, b)


def minimum(a, b) -> Tensor:
    return elementwise("minimum", a, b)


# ---------------------------------------------------------------------------
# Reductions and structural ops
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)
    out = np.asarray(out, dtype=a.dtype)

    def bw(g):
        if axis is None:
            return (np.full(shape, g, dtype=a.dtype),)
        axes = tuple(ax % len(shape) for ax in np.atleast_1d(axis))
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), bw, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def getitem(a: Tensor, key) -> Tensor:
    shape, dtype = a.shape, a.dtype
    out = np.array(a.data[key], copy=True)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _make(out, (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(tensors))
        )

    return _make(out, tensors, bw, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    out = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(a, tuple(idx)))
        start += s
    return out


def stack_scalars(values: Sequence[Tensor]) -> Tensor:
    return concat([v.reshape(1) for v in values], axis=0)


# ---------------------------------------------------------------------------
# Convolution, pooling, upsampling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with OIKK weights (im2col + matmul)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK weight")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride not in (1, 2):
        raise ValueError("conv2d: stride must be 1 or 2")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: output would be empty")
    xd = x.data
    wmat = weight.data.reshape(o, c * kh * kw)
    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        win = win[:, :, :ho, :wo]
        # (n, c, ho, wo, kh, kw) -> (n, c, kh, kw, ho, wo) -> (n, c*kh*kw, ho*wo)
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if kh == 1 and kw == 1 and padding == 0:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = gcols.reshape(n, c, ho, wo)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
                gx = gp[:, :, padding : padding + h, padding : padding + w] if padding else gp
                gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=(0, 2)) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, parents, bw, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: int = 1, padding: int | None = None) -> Tensor:
    """Max pooling with stride 1 and same padding (odd ``k``)."""
    if k % 2 != 1:
        raise ValueError("maxpool2d: kernel must be odd")
    if stride != 1:
        raise ValueError("maxpool2d: only stride 1 is supported")
    pad = k // 2 if padding is None else padding
    n, c, h, w = x.shape
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3)).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gp = np.zeros(xp.shape, dtype=xd.dtype)
        for di in range(k):
            for dj in range(k):
                m = arg == di * k + dj
                gp[:, :, di : di + ho, dj : dj + wo] += np.where(m, g, 0.0)
        return (np.ascontiguousarray(gp[:, :, pad : pad + h, pad : pad + w]),)

    return _make(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample")


# ---------------------------------------------------------------------------
# Attention and losses
# ---------------------------------------------------------------------------


def _softmax_np(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = _softmax_np(a.data)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product attention over flattened positions.

    ``q``, ``k`` and ``v`` are ``(N, C, L)`` or ``(N, C, H, W)``; channels are
    split into ``heads`` groups. Output has the shape of ``v``.
    """
    if not (q.shape == k.shape == v.shape):
        raise ValueError("attention: q, k, v must share a shape")
    shape = v.shape
    n, c = shape[:2]
    if heads < 1 or c % heads:
        raise ValueError(f"attention: {c} channels not divisible by {heads} heads")
    length = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    d = c // heads
    scale = 1.0 / np.sqrt(d)
    qh = q.data.reshape(n, heads, d, length)
    kh = k.data.reshape(n, heads, d, length)
    vh = v.data.reshape(n, heads, d, length)
    # weights[b, h, i, j]: query position i attends to key position j
    scores = np.matmul(qh.transpose(0, 1, 3, 2), kh) * scale
    wts = _softmax_np(scores)
    out = np.matmul(vh, wts.transpose(0, 1, 3, 2)).reshape(shape)

    def bw(g):
        gh = g.reshape(n, heads, d, length)
        gv = np.matmul(gh, wts)
        gw = np.matmul(gh.transpose(0, 1, 3, 2), vh)  # (n,h,Lq,Lk)
        gs = wts * (gw - (gw * wts).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(kh, gs.transpose(0, 1, 3, 2))
        gk = np.matmul(qh, gs)
        return gq.reshape(shape), gk.reshape(shape), gv.reshape(shape)

    res = _make(out, (q, k, v), bw, "attention")
    return (res, wts) if return_weights else res


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits; targets are constants."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValueError("bce_with_logits: shape mismatch")
    x = logits.data
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (logits,), lambda g: (g * (_sigmoid(x) - t),), "bce")


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict:
    """Back-propagate from a scalar ``loss``.

    Returns a dict mapping each ``requires_grad`` leaf to its gradient and also
    stores it on ``leaf.grad`` (overwriting any previous value).
    """
    if loss.size != 1:
        raise ValueError("backward() requires a scalar loss")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    found = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            found[id(node)] = (node, g)
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    result = {}
    for node, g in found.values():
        node.grad = g
        result[node] = g
    if leaves is not None:
        for leaf in leaves:
            if leaf not in result and leaf.requires_grad:
                leaf.grad = np.zeros_like(leaf.data)
                result[leaf] = leaf.grad
    return result
