import numpy as np
import pytest

from conftest import check_op_gradient
from gradcases import OP_CASES, toy_model_rel_error
from yolo26desk import tensor as T

SEEDS = range(20)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_over_seeds(name):
    errs = []
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        build, inputs = OP_CASES[name](rng)
        errs.append(check_op_gradient(build, inputs, rng))
    assert max(errs) < 1e-4, (name, max(errs))


def test_silu_gradient_tight():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        build, inputs = OP_CASES["silu"](rng)
        assert check_op_gradient(build, inputs, rng) < 1e-6


def test_conv_example_2x3x5x5(rng):
    build, inputs = OP_CASES["conv_s1"](rng)
    assert inputs[0].shape == (2, 3, 5, 5)
    assert check_op_gradient(build, inputs, rng) < 1e-4


def test_toy_model_gradient_few_seeds():
    # the acceptance run covers 20 seeds; three keep the unit suite quick
    for seed in range(3):
        assert toy_model_rel_error(seed) < 1e-4


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 3, 6, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    y = T.conv2d(T.Tensor(x), T.Tensor(w), None, 1, 1)
    np.testing.assert_array_equal(y.data, x)


def test_conv_k3s2_halves():
    x = T.Tensor(np.ones((1, 3, 640, 640), dtype=np.float32))
    w = T.Tensor(np.ones((4, 3, 3, 3), dtype=np.float32))
    assert T.conv2d(x, w, None, 2, 1).shape == (1, 4, 320, 320)


def test_conv_matches_direct_loop(rng):
    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    y = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 2, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_maxpool_constant_and_peak():
    c = T.maxpool2d(T.Tensor(np.full((1, 1, 7, 7), 3.0)), 5)
    np.testing.assert_array_equal(c.data, 3.0)
    x = np.zeros((1, 1, 9, 9))
    x[0, 0, 4, 4] = 1.0
    y = T.maxpool2d(T.Tensor(x), 5).data[0, 0]
    assert y.sum() == 25 and np.all(y[2:7, 2:7] == 1.0)


def _wide_pool(x, k):
    # direct k x k window maximum with -inf padding
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    out = np.empty_like(x)
    for i in range(x.shape[2]):
        for j in range(x.shape[3]):
            out[:, :, i, j] = xp[:, :, i : i + k, j : j + k].max(axis=(2, 3))
    return out


def test_chained_pools_equal_wide_windows(rng):
    x = rng.standard_normal((2, 2, 11, 11))
    y1 = T.maxpool2d(T.Tensor(x), 5)
    y2 = T.maxpool2d(y1, 5)
    y3 = T.maxpool2d(y2, 5)
    for y, k in ((y1, 5), (y2, 9), (y3, 13)):
        np.testing.assert_array_equal(y.data, _wide_pool(x, k))


def test_maxpool_rejects_even_kernel():
    with pytest.raises(ValueError):
        T.maxpool2d(T.Tensor(np.zeros((1, 1, 4, 4))), 4)


def test_upsample_values_and_gradient():
    x = np.arange(6.0).reshape(1, 1, 2, 3)
    t = T.Tensor(x, requires_grad=True)
    y = T.upsample_nearest2x(t)
    assert y.shape == (1, 1, 4, 6)
    np.testing.assert_array_equal(y.data[0, 0, ::2, ::2], x[0, 0])
    np.testing.assert_array_equal(y.data[0, 0, 1::2, 1::2], x[0, 0])
    g = np.arange(24.0).reshape(1, 1, 4, 6)
    T.backward((y * g).sum())
    np.testing.assert_array_equal(t.grad, g.reshape(1, 1, 2, 2, 3, 2).sum(axis=(3, 5)))


def test_softmax_rows_sum_to_one(rng):
    y = T.softmax(T.Tensor(rng.standard_normal((4, 7)) * 20))
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(y.data >= 0)


def test_attention_single_position_returns_v(rng):
    q, k, v = (T.Tensor(rng.standard_normal((2, 4, 1))) for _ in range(3))
    np.testing.assert_allclose(T.attention(q, k, v, heads=2).data, v.data, rtol=0, atol=1e-15)


def test_attention_uniform_scores_average_v(rng):
    q = T.Tensor(np.zeros((1, 4, 5)))
    v = T.Tensor(rng.standard_normal((1, 4, 5)))
    out, w = T.attention(q, T.Tensor(rng.standard_normal((1, 4, 5))), v, heads=1, return_weights=True)
    np.testing.assert_allclose(w, 1 / 5, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.data, np.repeat(v.data.mean(axis=2, keepdims=True), 5, axis=2), atol=1e-15)


def test_attention_head_divisibility():
    t = T.Tensor(np.zeros((1, 6, 3)))
    with pytest.raises(ValueError):
        T.attention(t, t, t, heads=4)


def test_backward_sum_and_squares(rng):
    x = rng.standard_normal((3, 4))
    t = T.Tensor(x, requires_grad=True)
    T.backward(t.sum())
    np.testing.assert_array_equal(t.grad, np.ones_like(x))
    T.backward((t * t).sum())
    np.testing.assert_allclose(t.grad, 2 * x, rtol=0, atol=0)


def test_backward_requires_scalar():
    t = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(t * 2.0)


def test_shared_subexpression_accumulates():
    t = T.Tensor(np.array([2.0]), requires_grad=True)
    y = t * t
    T.backward((y + y).sum())
    assert t.grad[0] == 8.0


def test_no_broadcasting():
    with pytest.raises(ValueError):
        T.Tensor(np.ones((2, 3))) + T.Tensor(np.ones(3))


def test_no_grad_builds_no_graph():
    t = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = t * 3.0
    assert not y.requires_grad


def test_unused_leaf_gets_zero_grad():
    a = T.Tensor(np.ones(2), requires_grad=True)
    b = T.Tensor(np.ones(2), requires_grad=True)
    T.backward(a.sum(), [a, b])
    np.testing.assert_array_equal(b.grad, 0.0)


def test_float32_mode_keeps_dtype():
    x = T.Tensor(np.ones((1, 2, 4, 4), dtype=np.float32))
    w = T.Tensor(np.ones((2, 2, 3, 3), dtype=np.float32))
    y = T.elementwise("silu", T.conv2d(x, w, None, 1, 1))
    assert y.dtype == np.float32
