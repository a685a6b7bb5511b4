import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avse import autograd as ag
from avse.autograd import Tensor, grad_check
from avse.errors import GradError, NumericError, ShapeError


def leaf(x):
    return Tensor(x, requires_grad=True)


def grad_of(f, x):
    t = leaf(x)
    f(t).backward()
    return t.grad


# ------------------------------------------------------------------ elementwise


def test_add_and_product_rule():
    np.testing.assert_array_equal(ag.add([1.0, 2.0], [3.0, 4.0]).values, [4.0, 6.0])
    a, b = leaf([2.0]), leaf([3.0])
    ag.sum(ag.mul(a, b)).backward()
    assert a.grad.tolist() == [3.0] and b.grad.tolist() == [2.0]


def test_scalar_broadcast_only():
    a = leaf(np.ones((2, 3)))
    out = ag.sum(ag.mul(a, 2.0))
    out.backward()
    np.testing.assert_array_equal(a.grad, np.full((2, 3), 2.0))
    with pytest.raises(ShapeError):
        ag.add(np.ones((2, 3)), np.ones(3))


def test_div_by_zero():
    with pytest.raises(NumericError):
        ag.div([1.0, 2.0], [1.0, 0.0])


def test_abs_grad_away_from_zero(rng):
    x = rng.uniform(-1, 1, 50)
    x = x[np.abs(x) > 1e-6]
    assert grad_check(lambda t: ag.sum(ag.abs(t)), x, eps=1e-7) < 1e-5
    assert grad_of(lambda t: ag.sum(ag.abs(t)), [0.0]).tolist() == [0.0]


def test_max_with_const_branch():
    g = grad_of(lambda t: ag.sum(ag.max_with_const(t, 1.0)), [0.5, 1.0, 2.0])
    assert g.tolist() == [0.0, 1.0, 1.0]
    g = grad_of(lambda t: ag.sum(ag.min_with_const(t, np.array([1.0, 1.0, 1.0]))), [0.5, 1.0, 2.0])
    assert g.tolist() == [1.0, 1.0, 0.0]


@pytest.mark.parametrize("op", [ag.square, ag.sqrt, ag.sigmoid, ag.neg])
def test_unary_grad_check(op, rng):
    x = rng.uniform(0.1, 2.0, (4, 5))
    assert grad_check(lambda t: ag.sum(op(t)), x) < 1e-6


def test_sigmoid_values_and_grad():
    assert ag.sigmoid([0.0]).values[0] == 0.5
    x = np.linspace(-30, 30, 13)
    s = 1 / (1 + np.exp(-x))
    np.testing.assert_allclose(grad_of(lambda t: ag.sum(ag.sigmoid(t)), x), s * (1 - s), rtol=1e-12)
    assert grad_check(lambda t: ag.sum(ag.sigmoid(t)), np.linspace(-4, 4, 9)) < 1e-6
    assert np.all(np.isfinite(ag.sigmoid([-1000.0, 1000.0]).values))


def test_relu():
    assert ag.relu([-3.0]).values[0] == 0.0
    assert grad_of(lambda t: ag.sum(ag.relu(t)), [-3.0, 0.0, 2.0]).tolist() == [0.0, 0.0, 1.0]


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_results_raise():
    with pytest.raises(NumericError):
        ag.mul([1e200], [1e200])
    with pytest.raises(NumericError):
        ag.sqrt([-1.0])


# -------------------------------------------------------------------- matmul


def test_matmul_identity_and_loops(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(ag.matmul(np.eye(3), x).values, x)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
    out = ag.matmul(a, b).values
    for i in range(2):
        for j in range(2):
            assert out[i, j] == pytest.approx(sum(a[i, k] * b[k, j] for k in range(3)), abs=1e-12)
    assert grad_check(lambda t: ag.sum(ag.square(ag.matmul(t, b))), a) < 1e-6
    assert grad_check(lambda t: ag.sum(ag.square(ag.matmul(a, t))), b) < 1e-6
    with pytest.raises(ShapeError):
        ag.matmul(a, a)


# ---------------------------------------------------------------- convolution


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 5, 6))
    np.testing.assert_allclose(ag.conv2d(x, np.ones((1, 1, 1, 1))).values, x)


def test_conv_sliding_sums():
    x = np.arange(9.0).reshape(1, 3, 3)
    out = ag.conv2d(x, np.ones((1, 1, 2, 2))).values[0]
    ref = [[x[0, i:i + 2, j:j + 2].sum() for j in range(2)] for i in range(2)]
    np.testing.assert_array_equal(out, ref)


def conv_loop(x, k, stride, pad):
    C, H, W = x.shape
    K, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((K, Ho, Wo))
    for o in range(K):
        for i in range(Ho):
            for j in range(Wo):
                out[o, i, j] = np.sum(xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw] * k[o])
    return out


def test_conv_matches_loop(rng):
    x, k = rng.standard_normal((2, 6, 8)), rng.standard_normal((3, 2, 4, 4))
    np.testing.assert_allclose(ag.conv2d(x, k, stride=2, padding=1).values, conv_loop(x, k, 2, 1), atol=1e-12)


def test_conv_grad_check(rng):
    x, k, b = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    f = lambda t: ag.sum(ag.square(ag.conv2d(t, k, b, padding=1)))  # noqa: E731
    assert grad_check(f, x) < 1e-5
    assert grad_check(lambda t: ag.sum(ag.square(ag.conv2d(x, t, b, padding=1))), k) < 1e-5
    assert grad_check(lambda t: ag.sum(ag.square(ag.conv2d(x, k, t, padding=1))), b) < 1e-5


def test_conv_geometry_error():
    with pytest.raises(ShapeError):
        ag.conv2d(np.ones((1, 5, 5)), np.ones((1, 1, 2, 2)), stride=2)


@given(st.integers(0, 1000), st.sampled_from([(1, 0, 3), (2, 1, 4), (2, 0, 2), (1, 1, 3)]))
def test_conv_adjoint_identity(seed, geom):
    stride, pad, ksz = geom
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 8, 8))
    k = r.standard_normal((3, 2, ksz, ksz))
    y = r.standard_normal(ag.conv2d(x, k, stride=stride, padding=pad).shape)
    lhs = np.sum(ag.conv2d(x, k, stride=stride, padding=pad).values * y)
    back = ag.conv_transpose2d(y, k, stride=stride, padding=pad).values
    assert back.shape == x.shape
    assert lhs == pytest.approx(np.sum(x * back), abs=1e-10 * max(1.0, abs(lhs)))


def test_conv_transpose_doubles_and_grads(rng):
    y = rng.standard_normal((3, 4, 5))
    k = rng.standard_normal((3, 2, 4, 4))
    out = ag.conv_transpose2d(y, k, np.zeros(2), stride=2, padding=1)
    assert out.shape == (2, 8, 10)
    assert grad_check(lambda t: ag.sum(ag.square(ag.conv_transpose2d(t, k, stride=2, padding=1))), y) < 1e-5
    assert grad_check(lambda t: ag.sum(ag.square(ag.conv_transpose2d(y, t, stride=2, padding=1))), k) < 1e-5


# ------------------------------------------------------------------ pooling etc


def test_pool_freq():
    x = np.array([4.0, 1.0, 3.0, 2.0]).reshape(1, 4, 1)
    assert ag.pool_freq(x).values.ravel().tolist() == [4.0, 3.0]
    g = grad_of(lambda t: ag.sum(ag.pool_freq(t)), np.ones((1, 4, 2)))
    np.testing.assert_array_equal(g[0, :, 0], [1, 0, 1, 0])
    with pytest.raises(ShapeError):
        ag.pool_freq(np.ones((1, 5, 2)))


def test_pool_freq_grad_check(rng):
    x = rng.permutation(48).astype(float).reshape(2, 8, 3)  # distinct values, no ties
    assert grad_check(lambda t: ag.sum(ag.square(ag.pool_freq(t))), x, eps=1e-3) < 1e-5


def test_upsample_time(rng):
    x = rng.standard_normal((1, 2, 3))
    np.testing.assert_array_equal(ag.upsample_time(x, 1).values, x)
    out = ag.upsample_time(np.array([[[1.0, 2.0]]])).values.ravel()
    assert out.tolist() == [1.0, 1.0, 2.0, 2.0]
    assert grad_check(lambda t: ag.sum(ag.square(ag.upsample_time(t, 3))), x) < 1e-6
    with pytest.raises(ShapeError):
        ag.upsample(x, 0, 0)


def test_reductions(rng):
    assert ag.mean([1.0, 2.0, 3.0]).item() == 2.0
    n = leaf([3.0, 4.0])
    out = ag.l2_norm(n)
    assert out.item() == 5.0
    out.backward()
    np.testing.assert_allclose(n.grad, [0.6, 0.8])
    m = rng.standard_normal((3, 4))
    got = ag.mean(m, axis=0).values
    for j in range(4):
        assert got[j] == pytest.approx(sum(m[i, j] for i in range(3)) / 3, abs=1e-15)
    z = leaf(np.zeros(3))
    with pytest.raises(NumericError):
        ag.l2_norm(z).backward()
    assert grad_check(lambda t: ag.sum(ag.l2_norm(t, axis=1)), m) < 1e-6


def test_concat_split(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 5))
    c = ag.concat([a, b], axis=1)
    assert c.shape == (2, 8)
    pa, pb = ag.split(c, [3, 5], axis=1)
    np.testing.assert_array_equal(pa.values, a)
    np.testing.assert_array_equal(pb.values, b)
    ta, tb = leaf(a), leaf(b)
    w = rng.standard_normal((2, 8))
    ag.sum(ag.mul(ag.concat([ta, tb], axis=1), w)).backward()
    np.testing.assert_array_equal(ta.grad, w[:, :3])
    np.testing.assert_array_equal(tb.grad, w[:, 3:])
    with pytest.raises(ShapeError):
        ag.concat([a, np.ones((3, 3))], axis=1)


def test_segment_grad(rng):
    x = rng.standard_normal((3, 12))
    s = ag.segment(x, 5)
    assert s.shape == (8, 3, 5)
    np.testing.assert_array_equal(s.values[2, :, 0], x[:, 2])
    assert grad_check(lambda t: ag.sum(ag.square(ag.segment(t, 5))), x) < 1e-6


# ------------------------------------------------------------------- backward


def test_backward_basics(rng):
    x = rng.standard_normal(6)
    np.testing.assert_array_equal(grad_of(ag.sum, x), np.ones(6))
    np.testing.assert_allclose(grad_of(lambda t: ag.sum(ag.square(t)), x), 2 * x)


def test_backward_errors():
    t = leaf(np.ones(3))
    with pytest.raises(GradError):
        ag.square(t).backward()
    with pytest.raises(GradError):
        ag.sum(Tensor(np.ones(3))).backward()
    loss = ag.sum(ag.square(t))
    loss.backward()
    with pytest.raises(GradError):
        loss.backward()


def test_leaf_accumulates():
    t = leaf([1.0, 2.0])
    ag.sum(t).backward()
    ag.sum(ag.mul(t, 3.0)).backward()
    np.testing.assert_array_equal(t.grad, [4.0, 4.0])
    t.zero_grad()
    assert t.grad is None


def test_composite_conv_sigmoid_mean(rng):
    x, k = rng.standard_normal((2, 6, 6)), rng.standard_normal((2, 2, 3, 3))
    assert grad_check(lambda t: ag.mean(ag.sigmoid(ag.conv2d(x, t, padding=1))), k) < 1e-4


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 100))
def test_backward_linearity(a, b, seed):
    x = np.random.default_rng(seed).uniform(0.5, 2, 5)
    f = lambda t: ag.sum(ag.square(t))  # noqa: E731
    g = lambda t: ag.sum(ag.sigmoid(t))  # noqa: E731
    combo = grad_of(lambda t: ag.add(ag.mul(f(t), a), ag.mul(g(t), b)), x)
    np.testing.assert_allclose(combo, a * grad_of(f, x) + b * grad_of(g, x), atol=1e-12)


def test_tape_determinism(rng):
    x, k = rng.standard_normal((1, 6, 6)), rng.standard_normal((2, 1, 3, 3))
    runs = []
    for _ in range(2):
        t = leaf(k)
        loss = ag.mean(ag.sigmoid(ag.conv2d(x, t, padding=1)))
        loss.backward()
        runs.append((loss.item(), t.grad.copy()))
    assert runs[0][0] == runs[1][0]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


# ----------------------------------------------------------------- grad_check


def test_grad_check_sum_and_nondeterminism(rng):
    assert grad_check(ag.sum, rng.standard_normal(5)) < 1e-10
    state = {"n": 0}

    def flaky(t):
        state["n"] += 1
        return ag.mul(ag.sum(t), float(state["n"]))

    with pytest.raises(GradError):
        grad_check(flaky, np.ones(3))
