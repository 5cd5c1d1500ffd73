import math

import numpy as np
import pytest

from pageopt import neuro
from pageopt.neuro import ObjectiveWeights, ParamStore


def test_dense_examples():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(neuro.dense_forward(x, np.eye(3), np.zeros(3)), x)
    np.testing.assert_array_equal(neuro.dense_forward(x, np.zeros((3, 2)), np.array([1.0, 2.0])),
                                  [[1, 2], [1, 2]])
    with pytest.raises(neuro.ShapeMismatch):
        neuro.dense_forward(x, np.zeros((2, 2)), np.zeros(2))


def test_lstm_zero_and_saturation():
    h, c, _ = neuro.lstm_cell_forward(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((5, 12)),
                                      np.zeros(12))
    assert np.all(h == 0) and np.all(c == 0)
    b = np.zeros(12)
    b[:3] = -1e3  # input gate closed
    b[3:6] = 1e3  # forget gate open
    c0 = np.array([[0.3, -0.2, 0.7]])
    _, c1, _ = neuro.lstm_cell_forward(np.ones((1, 2)), np.ones((1, 3)), c0, np.zeros((5, 12)), b)
    np.testing.assert_array_equal(c1, c0)


def test_loss_examples():
    l, _ = neuro.binary_ce(np.array([0.0]), np.array([0.5]), 1.0)
    assert l == pytest.approx(math.log(2), abs=1e-15)
    l, _ = neuro.softmax_ce(np.zeros((1, 7)), np.array([3]), 1.0)
    assert l == pytest.approx(math.log(7), abs=1e-15)
    l, g = neuro.binary_ce(np.array([1.3, -2.0]), np.array([1.0, 0.0]), 0.0)
    assert l == 0 and np.all(g == 0)


def _check(f, arrays, analytic):
    with neuro.extended_precision(arrays):
        return neuro.max_grad_error(f, arrays, analytic)


@pytest.mark.parametrize("seed", range(3))
def test_lstm_gradient(seed):
    rng = np.random.default_rng(seed)
    x, h, c = rng.normal(size=(3, 2)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    W, b = rng.normal(size=(6, 16)) * 0.5, rng.normal(size=16) * 0.5
    uh, uc = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    arrays = {"x": x, "h": h, "c": c, "W": W, "b": b}

    def f():
        a = arrays
        hn, cn, _ = neuro.lstm_cell_forward(a["x"], a["h"], a["c"], a["W"], a["b"])
        return np.sum(hn * neuro.real(uh)) + np.sum(cn * neuro.real(uc))

    _, _, cache = neuro.lstm_cell_forward(x, h, c, W, b)
    dx, dh, dc, dW, db = neuro.lstm_cell_backward(uh, uc, cache)
    assert _check(f, arrays, {"x": dx, "h": dh, "c": dc, "W": dW, "b": db}) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    arrays = {"z": rng.normal(size=(4, 5))}
    y = rng.random((4, 5))
    w = rng.random((4, 5))
    t = rng.integers(0, 5, size=4)
    mask = np.ones((4, 5), dtype=bool)
    mask[0, (t[0] + 1) % 5] = False
    _, g = neuro.binary_ce(arrays["z"], y, w)
    assert _check(lambda: neuro.binary_ce(arrays["z"], y, w)[0], arrays, {"z": g}) < 1e-6
    _, g = neuro.softmax_ce(arrays["z"], t, w[:, 0], mask)
    g = np.where(mask, g, 0.0)
    assert _check(lambda: neuro.softmax_ce(arrays["z"], t, w[:, 0], mask)[0], arrays, {"z": g}) < 1e-6


def test_aggregate_loss():
    L = np.array([0.3, 0.5, 0.2])
    assert neuro.aggregate_loss(L, ObjectiveWeights("fixed", (1.0, 0.0, 0.0)))[0] == 0.3
    total, dL, ds = neuro.aggregate_loss(L, ObjectiveWeights("learned"), np.zeros(3))
    assert total == pytest.approx(L.sum(), abs=1e-15)
    np.testing.assert_array_equal(ds, 1.0 - L)


def _store(value, grad):
    s = ParamStore()
    s.add("p", np.array(value, dtype=np.float64))
    s.grads["p"][...] = grad
    return s


def test_adam_examples():
    s = _store([0.5, -2.0], 1.0)
    neuro.adam_step(s, 0.001)
    np.testing.assert_allclose(s["p"] - [0.5, -2.0], -0.001, atol=1e-8)
    s = _store([0.5], 0.0)
    neuro.adam_step(s, 0.001)
    assert s["p"][0] == 0.5


def test_adam_quadratic():
    s = _store([1.0], 0.0)
    for _ in range(500):
        s.grads["p"][...] = 2.0 * s["p"]
        neuro.adam_step(s, 0.01)
    assert abs(s["p"][0]) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    vals = {"a": np.random.default_rng(0).normal(size=(3, 2)), "b": np.array([np.pi])}
    neuro.save_checkpoint(tmp_path / "c", vals, {"k": 1}, 7)
    back, hp, seed = neuro.load_checkpoint(tmp_path / "c")
    assert hp == {"k": 1} and seed == 7
    for k in vals:
        np.testing.assert_array_equal(back[k], vals[k])
    neuro.save_checkpoint(tmp_path / "d", back, hp, seed)
    assert (tmp_path / "c").read_bytes() == (tmp_path / "d").read_bytes()


def test_extended_precision_restores():
    d = {"w": np.ones(2)}
    with neuro.extended_precision(d):
        assert d["w"].dtype == np.longdouble
        assert neuro.work_dtype() == np.longdouble
    assert d["w"].dtype == np.float64 and neuro.work_dtype() == np.float64
