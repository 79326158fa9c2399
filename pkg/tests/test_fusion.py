import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dmtnet.errors import StaleCache
from dmtnet.fusion import (
    SEP_CHANNELS,
    _conv2d_forward,
    fusion_backward,
    fusion_forward,
    init_fusion,
    sep4d_conv,
    squeeze_support,
)
from dmtnet.objectives import bce, bce_grad, fd_gradcheck
from gradcheck_instance import kink_margin_instance


def _delta():
    k = np.zeros((SEP_CHANNELS, 3, 3))
    k[:, 1, 1] = 1.0
    return k


def test_delta_kernels_are_identity(rng):
    corr = rng.random((3, 3, 2, 4))
    out = sep4d_conv(corr, _delta(), _delta(), np.zeros(SEP_CHANNELS))
    for c in range(SEP_CHANNELS):
        np.testing.assert_allclose(out[c], corr, atol=1e-12)


def test_zero_input_positive_bias(rng):
    b = np.array([0.5, 1.0, 0.0, 2.0])
    out = sep4d_conv(np.zeros((2, 2, 2, 2)), rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 3, 3)), b)
    for c in range(4):
        assert np.all(out[c] == b[c])
    out = sep4d_conv(np.zeros((2, 2, 2, 2)), rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 3, 3)), -b)
    assert np.all(out == 0)


@pytest.mark.parametrize("seed", range(6))
def test_sep4d_matches_oracle(seed):
    r = np.random.default_rng(seed)
    shape = tuple(int(x) for x in r.integers(1, 4, 4))
    corr = r.random(shape)
    kq, ks, b = r.standard_normal((4, 3, 3)), r.standard_normal((4, 3, 3)), 0.1 * r.standard_normal(4)
    np.testing.assert_allclose(sep4d_conv(corr, kq, ks, b), oracles.sep4d_conv(corr, kq, ks, b), atol=1e-10)


def test_squeeze_constant_and_single_cell():
    t = np.full((2, 3, 3, 2, 2), 0.7)
    sq = squeeze_support(t)
    assert sq.shape == (4, 3, 3) and np.allclose(sq, 0.7)
    t = np.zeros((1, 2, 2, 3, 3))
    t[0, :, :, 1, 2] = 0.9
    sq = squeeze_support(t)
    assert np.allclose(sq[0], 0.9 / 9) and np.allclose(sq[1], 0.9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_squeeze_support_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    t = r.random((2, 2, 2, 3, 3))
    perm = r.permutation(9)
    tp = t.reshape(2, 2, 2, 9)[..., perm].reshape(t.shape)
    np.testing.assert_allclose(squeeze_support(t), squeeze_support(tp), atol=1e-14)


def test_conv2d_matches_oracle(rng):
    x, w, b = rng.standard_normal((3, 4, 5)), rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)
    np.testing.assert_allclose(_conv2d_forward(x, w, b)[0], oracles.conv2d(x, w, b), atol=1e-12)


def _corrs(rng, sizes=(4, 2, 2)):
    return [rng.random((s,) * 4) for s in sizes], [rng.random((s,) * 4) for s in sizes]


def test_zero_correlations_give_half():
    p = init_fusion(3, seed=0)
    zeros = [np.zeros((s,) * 4, dtype=np.float32) for s in (16, 8, 4)]
    out, _ = fusion_forward(zeros, zeros, p, (64, 64))
    assert out.M_f.shape == (64, 64)
    assert np.all(out.M_f == 0.5) and np.all(out.M_b == 0.5)


def test_forward_deterministic(rng):
    cf, cb = _corrs(rng)
    p = init_fusion(3, seed=1)
    a, _ = fusion_forward(cf, cb, p, (8, 8))
    b, _ = fusion_forward(cf, cb, p, (8, 8))
    assert np.array_equal(a.M_f, b.M_f) and np.array_equal(a.M_b, b.M_b)


def test_zero_upstream_gives_zero_gradients(rng):
    cf, cb = _corrs(rng)
    p = init_fusion(3, seed=1)
    out, cache = fusion_forward(cf, cb, p, (8, 8))
    g, dcf, dcb = fusion_backward(cache, np.zeros((8, 8)), np.zeros((8, 8)))
    assert all(np.all(v == 0) for v in g.values())
    assert all(np.all(d == 0) for d in dcf + dcb)


def test_conv4_bias_gradient_is_sigmoid_weighted_sum(rng):
    cf, cb = _corrs(rng)
    p = init_fusion(3, seed=2)
    out, cache = fusion_forward(cf, cb, p, (4, 4), heads=("f",))
    up = rng.standard_normal((4, 4))
    g, _, _ = fusion_backward(cache, up, None)
    M = out.M_f.astype(np.float64)
    assert g["conv4.b"][0] == pytest.approx(np.sum(up * M * (1 - M)), rel=1e-5)


def test_stale_cache_detected(rng):
    cf, cb = _corrs(rng)
    p = init_fusion(3, seed=1)
    out, cache = fusion_forward(cf, cb, p, (8, 8), heads=("f",))
    fusion_backward(cache, np.ones((8, 8)), None, params=p)
    with pytest.raises(StaleCache):
        fusion_backward(cache, None, np.ones((8, 8)))
    replaced = dict(p)
    replaced["conv1.w"] = p["conv1.w"].copy()
    with pytest.raises(StaleCache):
        fusion_backward(cache, np.ones((8, 8)), None, params=replaced)


def test_generic_instance_gradients_converge_at_small_step(rng):
    # at h=1e-5 the kink-straddling fraction is negligible; sample coordinates per group
    cf, cb = _corrs(rng)
    p = {k: v.astype(np.float64) for k, v in init_fusion(3, seed=5).items()}
    target = (rng.random((8, 8)) > 0.5).astype(float)

    def fn(q):
        o, _ = fusion_forward(cf, None, q, (8, 8), heads=("f",))
        return bce(o.M_f, target)

    out, cache = fusion_forward(cf, None, p, (8, 8), heads=("f",))
    g, _, _ = fusion_backward(cache, bce_grad(out.M_f, target), None)
    coords = {k: rng.choice(v.size, size=min(v.size, 6), replace=False) for k, v in p.items()}
    assert fd_gradcheck(fn, p, g, h=1e-6, coords=coords) <= 1e-3


def test_correlation_gradients_match_finite_differences():
    cf, cb, p, target, _ = kink_margin_instance(seed=3)
    r = np.random.default_rng(0)
    params = {f"cf{l}": c for l, c in enumerate(cf)}

    def fn(q):
        o, _ = fusion_forward([q[f"cf{l}"] for l in range(3)], None, p, target.shape, heads=("f",))
        return bce(o.M_f, target)

    out, cache = fusion_forward(cf, None, p, target.shape, heads=("f",))
    _, dcf, _ = fusion_backward(cache, bce_grad(out.M_f, target), None)
    grads = {f"cf{l}": d for l, d in enumerate(dcf)}
    coords = {k: r.choice(v.size, size=10, replace=False) for k, v in params.items()}
    assert fd_gradcheck(fn, params, grads, h=1e-6, coords=coords) <= 1e-3
