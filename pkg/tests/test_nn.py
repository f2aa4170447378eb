"""ParameterStore, layers, Adam, gradient checker, and checkpoint format."""

import numpy as np
import pytest

from trajrep import autodiff as ad
from trajrep import nn
from trajrep.autodiff import Tensor


def adam_reference(params, grads_seq, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Independent textbook Adam used as the update oracle."""
    p = {k: v.copy() for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(val) for k, val in params.items()}
    for t, grads in enumerate(grads_seq, start=1):
        for k in p:
            g = grads[k]
            m[k] = beta1 * m[k] + (1 - beta1) * g
            v[k] = beta2 * v[k] + (1 - beta2) * g * g
            m_hat = m[k] / (1 - beta1 ** t)
            v_hat = v[k] / (1 - beta2 ** t)
            p[k] = p[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


def test_init_weight_bounds():
    rng = np.random.default_rng(0)
    w = nn.init_weight(rng, 64, (64, 128))
    bound = 1.0 / 8.0
    assert w.shape == (64, 128)
    assert np.all(np.abs(w) <= bound)
    # spread should fill a good part of the interval
    assert w.max() > 0.5 * bound and w.min() < -0.5 * bound


def test_store_rejects_duplicates_and_zero_grads():
    store = nn.ParameterStore()
    store.add("w", np.ones((2, 2)))
    with pytest.raises(ValueError):
        store.add("w", np.ones(2))
    grads = store.gradients()
    np.testing.assert_array_equal(grads["w"], np.zeros((2, 2)))


def test_affine_shapes_and_bias_init():
    store = nn.ParameterStore()
    rng = np.random.default_rng(1)
    nn.add_affine(store, "fc", rng, 3, 5)
    np.testing.assert_array_equal(store["fc_b"].data, np.zeros(5))
    out = nn.affine(store, "fc", np.ones((4, 3)))
    assert ad.as_array(out).shape == (4, 5)


def test_gru_step_reduces_to_candidate_when_gates_saturate():
    # With Wh and Wx zeroed and huge reset/negative update biases the cell
    # output approaches tanh(candidate bias).
    store = nn.ParameterStore()
    hidden = 3
    store.add("g_Wx", np.zeros((2, 3 * hidden)))
    store.add("g_Wh_rz", np.zeros((hidden, 2 * hidden)))
    store.add("g_Wh_n", np.zeros((hidden, hidden)))
    b = np.zeros(3 * hidden)
    b[hidden:2 * hidden] = -50.0  # update gate z -> 0, keep candidate
    b[2 * hidden:] = 0.7
    store.add("g_b", b)
    h = np.zeros((1, hidden))
    out = ad.as_array(nn.gru_step(store, "g", np.zeros((1, 2)), h, hidden))
    np.testing.assert_allclose(out, np.tanh(0.7), atol=1e-8)


def test_run_gru_reverse_differs_from_forward():
    store = nn.ParameterStore()
    rng = np.random.default_rng(2)
    nn.add_gru(store, "g", rng, 2, 4)
    xs = rng.normal(size=(3, 5, 2))
    fwd = ad.as_array(nn.run_gru(store, "g", xs, 4))
    bwd = ad.as_array(nn.run_gru(store, "g", xs, 4, reverse=True))
    assert fwd.shape == (3, 4)
    assert not np.allclose(fwd, bwd)
    # reversing the input sequence must reproduce the reverse pass
    rev = ad.as_array(nn.run_gru(store, "g", xs[:, ::-1], 4))
    np.testing.assert_allclose(rev, bwd, atol=1e-12)


def test_gru_gradient_check_small():
    store = nn.ParameterStore()
    rng = np.random.default_rng(3)
    nn.add_gru(store, "g", rng, 2, 3)
    nn.add_affine(store, "out", rng, 3, 1)
    xs = rng.normal(size=(2, 4, 2))

    def loss_fn():
        h = nn.run_gru(store, "g", xs, 3)
        o = nn.affine(store, "out", h)
        return ad.tsum(ad.mul(o, o))

    report = nn.gradient_check(loss_fn, store)
    assert report.passed, report.errors


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(4)
    store = nn.ParameterStore()
    store.add("a", rng.normal(size=(3, 2)))
    store.add("b", rng.normal(size=(4,)))
    initial = {k: t.data.copy() for k, t in store.params.items()}
    grads_seq = [{"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(4,))}
                 for _ in range(7)]
    for grads in grads_seq:
        nn.adam_step(store, grads, lr=0.01)
    want = adam_reference(initial, grads_seq, lr=0.01)
    for k in initial:
        np.testing.assert_allclose(store[k].data, want[k], atol=1e-12)
    assert store.step_count == 7


def test_adam_rejects_bad_gradients():
    store = nn.ParameterStore()
    store.add("w", np.ones(3))
    with pytest.raises(nn.ShapeError):
        nn.adam_step(store, {"w": np.ones((2, 2))}, lr=0.01)
    with pytest.raises(ad.NumericError):
        nn.adam_step(store, {"w": np.array([1.0, np.nan, 0.0])}, lr=0.01)


def test_gradient_check_flags_wrong_gradient():
    store = nn.ParameterStore()
    store.add("w", np.array([1.5]))

    def broken_loss():
        w = store["w"]
        # forward w^2 but a deliberately wrong local gradient (3w)
        return Tensor(w.data ** 2, [(w, lambda g: g * 3.0 * w.data)])

    report = nn.gradient_check(broken_loss, store)
    assert not report.passed


def test_gradient_check_requires_float64():
    with ad.use_dtype(np.float32):
        store = nn.ParameterStore()
        store.add("w", np.ones(2))
    with pytest.raises(ValueError):
        nn.gradient_check(lambda: ad.tsum(store["w"]), store)


def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(5)
    store = nn.ParameterStore()
    store.add("w", rng.normal(size=(3, 4)))
    store.add("b", rng.normal(size=(4,)))
    nn.adam_step(store, {"w": rng.normal(size=(3, 4)),
                         "b": rng.normal(size=(4,))}, lr=0.1)
    path = tmp_path / "model.ckpt"
    nn.save_checkpoint(store, path)
    loaded = nn.load_checkpoint(path)
    assert loaded.step_count == store.step_count
    assert loaded.names() == store.names()
    for k in store.names():
        np.testing.assert_array_equal(loaded[k].data, store[k].data)
        np.testing.assert_array_equal(loaded.m[k], store.m[k])
        np.testing.assert_array_equal(loaded.v[k], store.v[k])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT99" + b"\0" * 16)
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)
