import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dmtnet.errors import NonFiniteLoss, ShapeMismatch
from dmtnet.objectives import (
    LossWeights,
    OptimState,
    adam_step,
    bce,
    bce_grad,
    fd_gradcheck,
    loss_coarse,
    loss_dual,
    loss_dual_grad,
    loss_total,
    loss_tsf,
)

LN2 = math.log(2.0)


def test_bce_examples(rng):
    t = (rng.random((5, 5)) > 0.5).astype(float)
    assert bce(np.full((5, 5), 0.5), t) == pytest.approx(LN2, abs=1e-12)
    assert bce(t, t) <= 1e-6
    assert bce(t, t) == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)
    assert bce(np.array([0.9]), np.array([1.0])) == pytest.approx(0.1053605, abs=1e-7)
    with pytest.raises(ShapeMismatch):
        bce(np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bce_matches_oracle_and_gradient(seed):
    r = np.random.default_rng(seed)
    p, t = r.random(6), r.random(6)
    assert bce(p, t) == pytest.approx(oracles.bce(p, t), rel=1e-10)
    g = bce_grad(p, t)
    h = 1e-6
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        assert g[i] == pytest.approx((bce(p + e, t) - bce(p - e, t)) / (2 * h), rel=1e-4, abs=1e-7)


def test_bce_grad_zero_where_clipped():
    assert bce_grad(np.array([0.0, 1.0]), np.array([1.0, 0.0])).tolist() == [0.0, 0.0]


def test_loss_coarse_examples(rng):
    mask = np.zeros((8, 8), dtype=np.float32)
    mask[:4] = 1
    perfect = [mask[::2, ::2].copy(), mask.copy()]
    assert loss_coarse([mask], mask) <= 1e-6
    assert loss_coarse([np.full((4, 4), 0.5), np.full((8, 8), 0.5)], mask) == pytest.approx(LN2)
    assert loss_coarse(perfect[1:], mask) <= 1e-6


def test_loss_coarse_is_level_mean(rng):
    mask = (rng.random((8, 8)) > 0.5).astype(np.float32)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    assert loss_coarse([a, b], mask) == pytest.approx((bce(a, mask) + bce(b, mask)) / 2)


def test_loss_dual_examples(rng):
    m = (rng.random((6, 6)) > 0.5).astype(float)
    half = np.full((6, 6), 0.5)
    assert loss_dual(m, 1 - m, m) <= 2e-6
    assert loss_dual(half, half, m, LossWeights(alpha1=1.0)) == pytest.approx(2 * LN2, abs=1e-6)
    mf = rng.random((6, 6))
    assert loss_dual(mf, rng.random((6, 6)), m, LossWeights(alpha1=0.0)) == pytest.approx(bce(mf, m))


def test_loss_dual_grad_weights_background(rng):
    m = (rng.random((4, 4)) > 0.5).astype(float)
    mf, mb = rng.random((4, 4)), rng.random((4, 4))
    gf, gb = loss_dual_grad(mf, mb, m, LossWeights(alpha1=0.25))
    np.testing.assert_allclose(gf, bce_grad(mf, m))
    np.testing.assert_allclose(gb, 0.25 * bce_grad(mb, 1 - m))


def test_loss_total():
    assert loss_total(0.0, 1.3) == 1.3
    assert loss_total(2.0, 1.0, LossWeights(alpha2=0.5)) == 2.0
    assert loss_total(7.0, 1.0, LossWeights(alpha2=0.0)) == 1.0
    assert LossWeights().alpha1 == 1.0 and LossWeights().alpha2 == 0.5


def test_loss_tsf(rng):
    m = (rng.random((4, 4)) > 0.5).astype(float)
    assert loss_tsf([m], [m]) <= 1e-6
    assert loss_tsf([np.full((4, 4), 0.5)] * 2, [m, 1 - m]) == pytest.approx(LN2)
    a, b = rng.random((4, 4)), rng.random((4, 4))
    assert loss_tsf([a, b], [m, m]) == pytest.approx((bce(a, m) + bce(b, m)) / 2)
    with pytest.raises(ShapeMismatch):
        loss_tsf([], [])


# --- Adam -------------------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.0, -2.0], dtype=np.float32)}
    st_ = OptimState()
    out = adam_step(p, {"w": np.zeros(2)}, st_)
    assert np.array_equal(out["w"], p["w"]) and st_.t == 1


def test_adam_first_step_is_signed_lr():
    p = {"w": np.zeros(3)}
    out = adam_step(p, {"w": np.array([0.3, -5.0, 2e-3])}, OptimState(lr=1e-2))
    np.testing.assert_allclose(out["w"], [-1e-2, 1e-2, -1e-2], rtol=1e-4)


def test_adam_known_two_steps():
    # independent recomputation of the bias-corrected update
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    g1, g2 = 0.5, -0.2
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 ** 2
    x1 = 1.0 - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2 ** 2
    x2 = x1 - lr * (m2 / (1 - b1 ** 2)) / (math.sqrt(v2 / (1 - b2 ** 2)) + eps)
    s = OptimState(lr=lr)
    p = adam_step({"x": np.array([1.0])}, {"x": np.array([g1])}, s)
    p = adam_step(p, {"x": np.array([g2])}, s)
    assert p["x"][0] == pytest.approx(x2, abs=1e-12)


def test_adam_deterministic_and_identity_preserving(rng):
    p = {"a": rng.standard_normal(3), "b": rng.standard_normal(2)}
    g = {"a": rng.standard_normal(3), "b": rng.standard_normal(2)}
    s1, s2 = OptimState(), OptimState()
    o1 = adam_step(p, g, s1, names=["a"])
    o2 = adam_step(p, g, s2, names=["a"])
    assert np.array_equal(o1["a"], o2["a"])
    assert o1["b"] is p["b"] and o1["a"] is not p["a"]


def test_adam_zero_lr_leaves_params(rng):
    p = {"a": rng.standard_normal(3)}
    s = OptimState(lr=0.0)
    for _ in range(5):
        out = adam_step(p, {"a": rng.standard_normal(3)}, s)
        assert np.array_equal(out["a"], p["a"])
    with pytest.raises(ValueError):
        adam_step(p, {"a": np.zeros(3)}, OptimState(lr=-1.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adam_permutation_equivariant(seed):
    r = np.random.default_rng(seed)
    x, g = r.standard_normal(6), r.standard_normal(6)
    perm = r.permutation(6)
    a = adam_step({"x": x}, {"x": g}, OptimState())["x"]
    b = adam_step({"x": x[perm]}, {"x": g[perm]}, OptimState())["x"]
    np.testing.assert_array_equal(a[perm], b)


# --- finite differences -----------------------------------------------------------------

def test_gradcheck_quadratic_exact(rng):
    A = rng.standard_normal((4, 4))
    A = A @ A.T
    x = rng.standard_normal(4)

    def f(p):
        return 0.5 * float(p["x"] @ A @ p["x"])

    assert fd_gradcheck(f, {"x": x}, {"x": A @ x}) <= 1e-6


def test_gradcheck_detects_scaled_gradient(rng):
    A = np.diag([1.0, 2.0, 3.0])
    x = np.array([0.5, -1.0, 2.0])

    def f(p):
        return 0.5 * float(p["x"] @ A @ p["x"])

    assert fd_gradcheck(f, {"x": x}, {"x": 2 * A @ x}) == pytest.approx(1.0, abs=1e-6)


def test_gradcheck_non_finite():
    with pytest.raises(NonFiniteLoss):
        fd_gradcheck(lambda p: float("nan"), {"x": np.zeros(1)}, {"x": np.zeros(1)})
