"""Op-level checks for the reverse-mode engine against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajrep import autodiff as ad
from trajrep.autodiff import Tensor


def numeric_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_op(op_np, op_ad, x, tol=1e-6, weight=None):
    """Compare the analytic gradient of sum(w * op(x)) with differences."""
    x = np.asarray(x, dtype=np.float64)
    w = weight if weight is not None else np.ones(np.shape(op_np(x)))
    t = Tensor(x)
    out = ad.tsum(ad.mul(op_ad(t), w))
    out.backward()
    expected = numeric_grad(lambda v: float(np.sum(op_np(v) * w)), x)
    np.testing.assert_allclose(t.grad, expected, atol=tol, rtol=1e-5)


def test_add_mul_broadcast_grads():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    ta, tb = Tensor(a), Tensor(b)
    out = ad.tsum(ad.mul(ad.add(ta, tb), ad.add(ta, tb)))
    out.backward()
    np.testing.assert_allclose(ta.grad, 2.0 * (a + b), atol=1e-12)
    np.testing.assert_allclose(tb.grad, 2.0 * (a + b).sum(axis=0), atol=1e-12)


def test_div_power_grads():
    rng = np.random.default_rng(1)
    x = rng.uniform(0.5, 2.0, size=(5,))
    check_op(lambda v: 1.0 / v, lambda t: ad.div(1.0, t), x)
    check_op(lambda v: v ** 3.0, lambda t: ad.power(t, 3.0), x)


def test_matmul_grads():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))
    ta, tb = Tensor(a), Tensor(b)
    ad.tsum(ad.mul(ad.matmul(ta, tb), w)).backward()
    np.testing.assert_allclose(ta.grad, w @ b.T, atol=1e-12)
    np.testing.assert_allclose(tb.grad, a.T @ w, atol=1e-12)


@pytest.mark.parametrize("op_np,op_ad,lo,hi", [
    (np.exp, ad.exp, -2.0, 2.0),
    (np.log, ad.log, 0.2, 3.0),
    (np.sqrt, ad.sqrt, 0.1, 4.0),
    (np.tanh, ad.tanh, -3.0, 3.0),
    (lambda v: 1 / (1 + np.exp(-v)), ad.sigmoid, -3.0, 3.0),
    (lambda v: np.logaddexp(0.0, v), ad.softplus, -3.0, 3.0),
    (np.abs, ad.absolute, 0.2, 3.0),
])
def test_elementwise_grads(op_np, op_ad, lo, hi):
    rng = np.random.default_rng(3)
    x = rng.uniform(lo, hi, size=(6,))
    check_op(op_np, op_ad, x)


def test_relu_and_clip_grads():
    x = np.array([-2.0, -0.5, 0.5, 2.0])
    t = Tensor(x)
    ad.tsum(ad.relu(t)).backward()
    np.testing.assert_array_equal(t.grad, [0.0, 0.0, 1.0, 1.0])
    t = Tensor(x)
    ad.tsum(ad.clip(t, -1.0, 1.0)).backward()
    np.testing.assert_array_equal(t.grad, [0.0, 1.0, 1.0, 0.0])


def test_safe_sqrt_zero_gradient_at_kink():
    t = Tensor(np.array([0.0, 4.0]))
    ad.tsum(ad.safe_sqrt(t)).backward()
    np.testing.assert_allclose(t.grad, [0.0, 0.25], atol=1e-12)


def test_atan2_values_and_grads():
    rng = np.random.default_rng(4)
    y = rng.normal(size=(5,)) + 2.0
    x = rng.normal(size=(5,)) + 2.0
    ty, tx = Tensor(y), Tensor(x)
    out = ad.tsum(ad.atan2(ty, tx))
    out.backward()
    np.testing.assert_allclose(ad.as_array(ad.atan2(y, x)), np.arctan2(y, x))
    np.testing.assert_allclose(
        ty.grad, numeric_grad(lambda v: float(np.sum(np.arctan2(v, x))), y),
        atol=1e-6)
    np.testing.assert_allclose(
        tx.grad, numeric_grad(lambda v: float(np.sum(np.arctan2(y, v))), x),
        atol=1e-6)


def test_wrap_angle_values():
    x = np.array([0.0, np.pi, -np.pi + 1e-9, 3 * np.pi, -2.5 * np.pi])
    w = ad.as_array(ad.wrap_angle(x))
    assert np.all(w <= np.pi + 1e-12) and np.all(w > -np.pi - 1e-12)
    np.testing.assert_allclose(np.cos(w), np.cos(x), atol=1e-12)
    np.testing.assert_allclose(np.sin(w), np.sin(x), atol=1e-12)


def test_minimum_maximum_grads():
    a = np.array([1.0, 3.0, 2.0])
    b = np.array([2.0, 1.0, 2.0])
    ta, tb = Tensor(a), Tensor(b)
    ad.tsum(ad.minimum(ta, tb)).backward()
    np.testing.assert_array_equal(ta.grad, [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(tb.grad, [0.0, 1.0, 0.0])


def test_reductions_with_axis_tuples():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 4))
    t = Tensor(x)
    out = ad.tsum(ad.tmean(ad.mul(t, t), axis=(1, 2)))
    out.backward()
    np.testing.assert_allclose(ad.as_array(out),
                               (x * x).mean(axis=(1, 2)).sum(), atol=1e-12)
    np.testing.assert_allclose(t.grad, 2.0 * x / 12.0, atol=1e-12)


def test_logsumexp_matches_naive():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 7)) * 30.0  # large values: needs the max shift
    got = ad.as_array(ad.logsumexp(x, axis=1))
    want = np.log(np.exp(x - x.max(axis=1, keepdims=True)).sum(axis=1)) \
        + x.max(axis=1)
    np.testing.assert_allclose(got, want, atol=1e-10)
    check_op(lambda v: np.log(np.exp(v).sum(axis=1)),
             lambda t: ad.logsumexp(t, axis=1), rng.normal(size=(3, 5)))


def test_cross_entropy_matches_manual():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    t = Tensor(logits)
    loss = ad.cross_entropy_with_logits(t, labels)
    loss.backward()
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    want = -np.log(p[np.arange(6), labels]).mean()
    np.testing.assert_allclose(float(ad.as_array(loss)), want, atol=1e-12)
    expected = numeric_grad(
        lambda v: -float(np.mean(np.log(
            (np.exp(v) / np.exp(v).sum(axis=1, keepdims=True))
            [np.arange(6), labels]))), logits)
    np.testing.assert_allclose(t.grad, expected, atol=1e-6)


def test_getitem_scatter_accumulates():
    t = Tensor(np.arange(5.0))
    out = ad.add(t[np.array([0, 0, 2])], 0.0)
    ad.tsum(out).backward()
    np.testing.assert_array_equal(t.grad, [2.0, 0.0, 1.0, 0.0, 0.0])


def test_concatenate_stack_grads():
    a = Tensor(np.ones((2, 2)))
    b = Tensor(np.ones((3, 2)))
    w = np.arange(10.0).reshape(5, 2)
    ad.tsum(ad.mul(ad.concatenate([a, b], axis=0), w)).backward()
    np.testing.assert_array_equal(a.grad, w[:2])
    np.testing.assert_array_equal(b.grad, w[2:])
    c = Tensor(np.ones(3))
    d = Tensor(np.ones(3))
    ad.tsum(ad.mul(ad.stack([c, d], axis=0), np.array([[1.0], [2.0]]))).backward()
    np.testing.assert_array_equal(c.grad, [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(d.grad, [2.0, 2.0, 2.0])


def test_l2_normalize_rows_and_grad():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 3))
    out = ad.as_array(ad.l2_normalize(x, axis=1))
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)
    w = rng.normal(size=(4, 3))
    check_op(lambda v: v / np.linalg.norm(v, axis=1, keepdims=True),
             lambda t: ad.l2_normalize(t, axis=1), x, weight=w)


def test_diamond_graph_accumulates_once():
    # y = x*x + x*x reuses the same node twice; gradient must be 4x
    t = Tensor(np.array([3.0]))
    sq = ad.mul(t, t)
    ad.tsum(ad.add(sq, sq)).backward()
    np.testing.assert_allclose(t.grad, [12.0], atol=1e-12)


def test_check_finite_raises():
    with pytest.raises(ad.NumericError):
        ad.check_finite(np.array([1.0, np.inf]), "test")
    x = np.ones(3)
    assert ad.check_finite(x, "test") is x


def test_dtype_context_switches_and_restores():
    assert ad.default_dtype() is np.float64
    with ad.use_dtype(np.float32):
        t = Tensor(np.ones(3))
        assert t.data.dtype == np.float32
        out = ad.mul(t, np.ones(3))  # float64 operand is cast on entry
        out.backward(np.ones(3, dtype=np.float32))
        assert out.data.dtype == np.float32
        assert t.grad.dtype == np.float32
    assert ad.default_dtype() is np.float64
    with pytest.raises(ValueError):
        ad.set_default_dtype(np.int32)


def test_ops_accept_plain_arrays():
    x = np.array([1.0, 2.0])
    out = ad.add(ad.mul(x, 2.0), 1.0)
    assert isinstance(out, np.ndarray)
    np.testing.assert_array_equal(out, [3.0, 5.0])


@given(st.lists(st.floats(-50.0, 50.0), min_size=2, max_size=8))
@settings(max_examples=50, deadline=None)
def test_wrap_angle_is_shift_by_two_pi(values):
    x = np.asarray(values)
    w = ad.as_array(ad.wrap_angle(x))
    k = (x - w) / (2.0 * np.pi)
    np.testing.assert_allclose(k, np.round(k), atol=1e-9)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_unbroadcast_inverts_broadcasting(rows, cols, seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(rows, cols))
    np.testing.assert_allclose(ad._unbroadcast(g, (1, cols)),
                               g.sum(axis=0, keepdims=True))
    np.testing.assert_allclose(ad._unbroadcast(g, (cols,)), g.sum(axis=0))
    np.testing.assert_allclose(ad._unbroadcast(g, (rows, cols)), g)
