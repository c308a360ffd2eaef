"""Differentiable-op cases shared by the unit tests and the acceptance run.

Each case maps a seed to ``(build, inputs)``; ``build`` takes tensors and
returns a tensor. Inputs are f64 and kept away from kinks (ties in max/min,
zero for sqrt/log) so central differences are well defined.
"""

import numpy as np

from conftest import TINY_SPEC
from yolo26desk import tensor as T
from yolo26desk.archspec import parse_spec
from yolo26desk.assign import AssignConfig, anchors_for_input, assign_image
from yolo26desk.blocks import SPPF, C3k2, Model, ParamStore, PSABlock
from yolo26desk.decode import decode_boxes
from yolo26desk.loss import ProgLossState, ciou_tensor, total_loss


def _x(rng, *shape):
    return rng.standard_normal(shape)


def _pos(rng, *shape):
    return rng.uniform(0.5, 2.0, shape)


def _apart(rng, *shape):
    # two operands that never tie
    a = rng.standard_normal(shape)
    b = a + rng.choice([-1.0, 1.0], shape) * rng.uniform(0.1, 1.0, shape)
    return a, b


def case_conv_s1(rng):
    return (lambda x, w, b: T.conv2d(x, w, b, 1, 1)), [_x(rng, 2, 3, 5, 5), _x(rng, 4, 3, 3, 3), _x(rng, 4)]


def case_conv_s2(rng):
    return (lambda x, w, b: T.conv2d(x, w, b, 2, 1)), [_x(rng, 2, 3, 5, 5), _x(rng, 4, 3, 3, 3), _x(rng, 4)]


def case_conv_1x1(rng):
    return (lambda x, w, b: T.conv2d(x, w, b, 1, 0)), [_x(rng, 2, 3, 4, 4), _x(rng, 5, 3, 1, 1), _x(rng, 5)]


def case_maxpool(rng):
    # distinct values on a coarse grid keep window maxima unique under +-h
    x = rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.01
    return (lambda t: T.maxpool2d(t, 5)), [x.astype(np.float64)]


def case_upsample(rng):
    return T.upsample_nearest2x, [_x(rng, 2, 3, 3, 4)]


def case_silu(rng):
    return (lambda t: T.elementwise("silu", t)), [_x(rng, 3, 7)]


def case_sigmoid(rng):
    return (lambda t: T.elementwise("sigmoid", t)), [_x(rng, 3, 7)]


def case_exp(rng):
    return (lambda t: T.elementwise("exp", t)), [_x(rng, 3, 7)]


def case_log(rng):
    return (lambda t: T.elementwise("log", t)), [_pos(rng, 3, 7)]


def case_sqrt(rng):
    return (lambda t: T.elementwise("sqrt", t)), [_pos(rng, 3, 7)]


def case_atan(rng):
    return (lambda t: T.elementwise("atan", t)), [_x(rng, 3, 7)]


def case_add(rng):
    return (lambda a, b: a + b), [_x(rng, 4, 5), _x(rng, 4, 5)]


def case_sub(rng):
    return (lambda a, b: a - b), [_x(rng, 4, 5), _x(rng, 4, 5)]


def case_mul(rng):
    return (lambda a, b: a * b), [_x(rng, 4, 5), _x(rng, 4, 5)]


def case_div(rng):
    return (lambda a, b: a / b), [_x(rng, 4, 5), _pos(rng, 4, 5)]


def case_maximum(rng):
    return T.maximum, list(_apart(rng, 4, 5))


def case_minimum(rng):
    return T.minimum, list(_apart(rng, 4, 5))


def case_power(rng):
    return (lambda t: t**3.0), [_x(rng, 4, 5)]


def case_scalar_ops(rng):
    return (lambda t: (2.0 - t) * 3.0 / 1.5 + 0.5 / t), [_pos(rng, 4, 5)]


def case_sum_axis(rng):
    return (lambda t: t.sum(axis=1) * t.sum(axis=1)), [_x(rng, 3, 4, 5)]


def case_mean(rng):
    return (lambda t: (t * t).mean(axis=(0, 2))), [_x(rng, 3, 4, 5)]


def case_reshape_transpose(rng):
    return (lambda t: t.reshape(4, 3, 5).transpose(2, 0, 1) * 1.0), [_x(rng, 3, 4, 5)]


def case_getitem(rng):
    idx = (np.array([0, 2, 2, 1]), np.array([1, 0, 0, 3]))
    return (lambda t: t[idx]), [_x(rng, 3, 4, 2)]


def case_concat_split(rng):
    def build(a, b):
        c = T.concat([a, b], axis=1)
        p, q = T.split(c, [3, 2], axis=1)
        return T.concat([q * 2.0, p], axis=1)

    return build, [_x(rng, 2, 2, 3), _x(rng, 2, 3, 3)]


def case_softmax(rng):
    return T.softmax, [_x(rng, 3, 6)]


def case_attention(rng):
    return (lambda q, k, v: T.attention(q, k, v, heads=2)), [_x(rng, 2, 4, 3, 3), _x(rng, 2, 4, 3, 3),
                                                              _x(rng, 2, 4, 3, 3)]


def case_bce(rng):
    t = rng.uniform(0, 1, (5, 3))
    return (lambda z: T.bce_with_logits(z, t)), [_x(rng, 5, 3) * 3]


def case_ciou(rng):
    m = 6
    cx, cy = rng.uniform(10, 30, m), rng.uniform(10, 30, m)
    target = np.stack([cx - 5, cy - 4, cx + 6, cy + 5], axis=1)
    x1 = target[:, 0] + rng.uniform(-3, 3, m)
    y1 = target[:, 1] + rng.uniform(-3, 3, m)
    x2 = target[:, 2] + rng.uniform(-3, 3, m)
    y2 = target[:, 3] + rng.uniform(-3, 3, m)
    return (lambda a, b, c, d: ciou_tensor((a, b, c, d), target)), [x1, y1, x2, y2]


def _block_case(make, rng, shape):
    store = ParamStore(int(rng.integers(1 << 30)), np.float64)
    block = make(store)
    names = store.names()

    def build(x, *ps):
        for n, p in zip(names, ps):
            store._tensors[n] = p
        return block(x)

    return build, [_x(rng, *shape)] + [store[n].data.copy() for n in names]


def case_sppf_block(rng):
    return _block_case(lambda s: SPPF(s, "b", 4, 4, 5), rng, (1, 4, 5, 5))


def case_c3k2_attn_block(rng):
    return _block_case(lambda s: C3k2(s, "b", 4, 4, 1, False, 0.5, True), rng, (1, 4, 4, 4))


def case_psa_block(rng):
    return _block_case(lambda s: PSABlock(s, "b", 4), rng, (1, 4, 3, 3))


OP_CASES = {
    name[5:]: fn for name, fn in sorted(globals().items()) if name.startswith("case_") and callable(fn)
}


# ---------------------------------------------------------------------------
# Full toy model
# ---------------------------------------------------------------------------


def toy_loss_problem(seed: int):
    """Tiny model, fixed assignments and a closure returning the scalar total loss."""
    rng = np.random.default_rng(seed)
    spec = parse_spec(TINY_SPEC)
    size = 64
    model = Model(spec, seed=seed, dtype=np.float64, img_size=size)
    x = rng.uniform(0, 1, (2, 3, size, size))
    anchors = anchors_for_input(size, size)
    gts = []
    for _ in range(2):
        g = int(rng.integers(1, 4))
        xy = rng.uniform(0, 40, (g, 2))
        wh = rng.uniform(1.0, 24.0, (g, 2))
        gts.append((np.concatenate([xy, xy + wh], axis=1), rng.integers(0, spec.class_count, g)))
    with T.no_grad():
        out = model(T.Tensor(x))
    assignments = []
    for i, (b, c) in enumerate(gts):
        bm, sm = decode_boxes([o.data[i] for o in out.one2many], anchors)
        bo, so = decode_boxes([o.data[i] for o in out.one2one], anchors)
        assignments.append(assign_image(sm, bm, so, bo, b, c, anchors, AssignConfig(), size))
    state = ProgLossState(int(rng.integers(0, 10)), 10)

    def loss():
        return total_loss(model(T.Tensor(x)), gts, assignments, state, anchors)

    return model, loss, rng


def toy_model_rel_error(seed: int, n_coords: int = 60, h=1e-5) -> float:
    model, loss, rng = toy_loss_problem(seed)
    lb = loss()
    params = model.parameters()
    T.backward(lb.total, params)
    sizes = np.array([p.size for p in params])
    flat = rng.choice(sizes.sum(), n_coords, replace=False)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    coords = [(int(np.searchsorted(starts, j, side="right") - 1), 0) for j in flat]
    coords = [(ai, int(j - starts[ai])) for (ai, _), j in zip(coords, flat)]
    num = []
    for ai, j in coords:
        a = params[ai].data
        old = a.flat[j]
        a.flat[j] = old + h
        with T.no_grad():
            fp = loss().weighted_total
        a.flat[j] = old - h
        with T.no_grad():
            fm = loss().weighted_total
        a.flat[j] = old
        num.append((fp - fm) / (2 * h))
    ana = np.array([params[ai].grad.flat[j] for ai, j in coords])
    num = np.array(num)
    return float(np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana), 1e-300))
