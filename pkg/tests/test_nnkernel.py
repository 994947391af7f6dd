import math

import numpy as np
import pytest

from transflower import nnkernel as nk
from transflower.nnkernel import AttentionParams, NumericHealthError, ShapeError


def test_linear_examples():
    assert np.array_equal(nk.linear(np.array([1.0, 2.0]), np.eye(2), np.array([3.0, 3.0])), [4, 5])
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nk.linear(x, np.eye(3), np.zeros(3)), x)
    with pytest.raises(ShapeError):
        nk.linear(x, np.eye(2), np.zeros(2))


def test_linear_gradient(rng):
    x, W, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
    wy = rng.normal(size=(4, 5))

    def fn(p):
        y = nk.linear(p["x"], p["W"], p["b"])
        dx, dW, db = nk.linear_backward(wy, p["x"], p["W"])
        return float((y * wy).sum()), {"x": dx, "W": dW, "b": db}

    assert nk.grad_check(fn, {"x": x, "W": W, "b": b}) <= 1e-6


def test_softmax_examples():
    assert np.allclose(nk.softmax(np.zeros(4), np.ones(4, bool)), 0.25)
    assert np.allclose(nk.softmax(np.array([0.0, math.log(3)])), [0.25, 0.75], atol=1e-6)
    s = np.array([0.3, -1.2, 2.0])
    assert np.allclose(nk.softmax(s + 1000), nk.softmax(s))


def test_softmax_masking_and_extremes(rng):
    s = rng.normal(size=(20, 10)) * 1e4
    mask = rng.random((20, 10)) < 0.6
    mask[:, 0] = True
    p = nk.softmax(s, mask)
    assert np.all(p[~mask] == 0.0)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-6) and np.all(np.isfinite(p))
    with pytest.raises(ValueError):
        nk.softmax(np.zeros(3), np.zeros(3, bool))


def test_layer_norm_examples(rng):
    assert np.array_equal(nk.layer_norm(np.full(5, 3.0), np.ones(5), np.zeros(5)), np.zeros(5))
    want = 1 / math.sqrt(1 + 1e-5)
    assert np.allclose(nk.layer_norm(np.array([-1.0, 1.0]), np.ones(2), np.zeros(2)), [-want, want], atol=1e-9)
    y = nk.layer_norm(rng.normal(size=(50, 16)) * 7 + 3, np.ones(16), np.zeros(16))
    assert np.allclose(y.mean(axis=1), 0, atol=1e-6) and np.allclose(y.var(axis=1), 1, atol=1e-4)


def test_layer_norm_gradient(rng):
    x, g, b = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    wy = rng.normal(size=(3, 6))

    def fn(p):
        y, cache = nk.layer_norm_forward(p["x"], p["g"], p["b"])
        dx, dg, db = nk.layer_norm_backward(wy, cache, p["g"])
        return float((y * wy).sum()), {"x": dx, "g": dg, "b": db}

    assert nk.grad_check(fn, {"x": x, "g": g, "b": b}) <= 1e-6


def test_dropout():
    x = np.ones(100_000)
    rng = nk.make_rng(1234, "dropout-test")
    assert np.array_equal(nk.dropout(x, 0.1, False, rng)[0], x)
    assert np.array_equal(nk.dropout(x, 0.0, True, rng)[0], x)
    y, scale = nk.dropout(x, 0.1, True, rng)
    assert abs(y.mean() - 1.0) <= 0.01 and abs((y == 0).mean() - 0.1) <= 0.01
    assert np.array_equal(nk.dropout_backward(np.ones_like(x), scale), scale)
    with pytest.raises(ValueError):
        nk.dropout(x, 1.0, True, rng)


def test_rng_streams_are_independent_of_call_order():
    a = nk.make_rng(5, "x", 1).random(3)
    nk.make_rng(5, "y").random(10)
    assert np.array_equal(a, nk.make_rng(5, "x", 1).random(3))
    assert not np.array_equal(a, nk.make_rng(5, "x", 2).random(3))


def _attn(rng, d=6, h=2, scale=0.5):
    return AttentionParams(*(rng.normal(size=(h, d, d // h)) * scale for _ in range(3)),
                           rng.normal(size=(d, d)) * scale)


def test_attention_single_unmasked(rng):
    p = _attn(rng)
    E = rng.normal(size=(1, 6))
    Eo, A = nk.attention_layer(E, p, np.array([True]))
    V = np.concatenate([E @ p.wv[k] for k in range(2)], axis=-1)
    assert np.allclose(Eo, E + V @ p.wz)
    assert np.array_equal(A, np.ones((2, 1, 1)))


def test_attention_contracts(rng):
    p = _attn(rng)
    E = rng.normal(size=(5, 6))
    mask = np.array([True, True, False, True, False])
    Eo, A = nk.attention_layer(E, p, mask)
    assert np.allclose(A[:, mask].sum(axis=-1), 1, atol=1e-12)
    assert np.all(A[:, :, ~mask] == 0)
    assert np.array_equal(Eo[~mask], E[~mask])
    p.wq[:] = 0
    _, A = nk.attention_layer(E, p, mask)
    assert np.allclose(A[:, mask][..., mask], 1 / 3)
    p.wz[:] = 0
    assert np.array_equal(nk.attention_layer(E, p, mask)[0], E)
    with pytest.raises(ValueError):
        nk.attention_layer(E, p, np.zeros(5, bool))
    with pytest.raises(ShapeError):
        nk.attention_layer(rng.normal(size=(5, 4)), p, mask)


@pytest.mark.parametrize("scaled", [False, True])
def test_attention_gradient(rng, scaled):
    p0 = _attn(rng)
    E0 = rng.normal(size=(2, 4, 6))
    mask = np.array([[True, True, True, False], [True, False, True, True]])
    w = rng.normal(size=(2, 4, 6))
    z = np.where(rng.random((2, 4, 6)) < 0.2, 0.0, 1.25)

    def fn(q):
        ap = AttentionParams(q["wq"], q["wk"], q["wv"], q["wz"])
        Eo, _, cache = nk.attention_forward(q["E"], ap, mask, scaled, z)
        dE, g = nk.attention_backward(w, cache, ap)
        return float((Eo * w).sum()), {"E": dE, "wq": g.wq, "wk": g.wk, "wv": g.wv, "wz": g.wz}

    assert nk.grad_check(fn, {"E": E0, "wq": p0.wq, "wk": p0.wk, "wv": p0.wv, "wz": p0.wz}) <= 1e-4


def test_attention_params_validation(rng):
    with pytest.raises(ShapeError):
        AttentionParams(np.zeros((3, 6, 2)), np.zeros((3, 6, 2)), np.zeros((3, 6, 2)), np.zeros((5, 5))).validate()


def test_grad_check_quadratic_and_fault_injection(rng):
    p = {"p": rng.normal(size=10)}
    assert nk.grad_check(lambda q: (float(q["p"] @ q["p"]), {"p": 2 * q["p"]}), p) <= 1e-6
    bad = nk.grad_check(lambda q: (float(q["p"] @ q["p"]), {"p": 2.02 * q["p"]}), p)
    assert bad >= 5e-3


def test_check_finite():
    with pytest.raises(NumericHealthError):
        nk.check_finite(np.array([1.0, np.nan]), "x")
