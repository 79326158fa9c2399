"""Fusion-net instances whose ReLU pre-activations sit well away from zero.

Central differences with h=1e-3 straddle a ReLU kink whenever a
pre-activation lies within ~h*|d pre / d param| of zero; on generic random
instances hundreds of coordinates do. Each channel bias is therefore placed
at the midpoint of the widest gap among that channel's pre-activations
(central 80%, both heads pooled), which keeps every unit's on/off state
fixed under the perturbation. Draws whose support max-pool has a runner-up
within ``min_gap`` of the maximum are rejected for the same reason (the
argmax would switch under the perturbation).
"""

import numpy as np

import dmtnet.fusion as fusion
from dmtnet.tensor import bilinear_resize

CONVS = ("conv1", "conv2", "conv3")


def _gap_bias(values):
    v = np.sort(np.concatenate([x.ravel() for x in values]))
    lo, hi = int(0.1 * v.size), max(int(0.9 * v.size), int(0.1 * v.size) + 1)
    seg = v[lo:hi + 1]
    gaps = np.diff(seg)
    i = int(np.argmax(gaps))
    return -(seg[i] + seg[i + 1]) / 2, gaps[i] / 2


def _sep_raw(corr, kq, ks):
    _, (_, TS, _) = fusion._sep4d_forward(corr, kq, ks, np.zeros(kq.shape[0]))
    c = kq.shape[0]
    return np.einsum("cn,ncx->cx", ks.reshape(c, 9), TS.reshape(9, c, -1))


def _top_gap(out):
    c, hq, wq = out.shape[:3]
    top = np.sort(out.reshape(c, hq, wq, -1), axis=-1)[..., -2:]
    live = top[..., 1] > 0
    return float((top[..., 1] - top[..., 0])[live].min()) if live.any() else np.inf


def kink_margin_instance(seed=0, sizes=(4, 2, 2), out_hw=(8, 8), min_gap=1e-3, max_tries=200):
    """Returns ``(corr_f, corr_b, params, target, min_margin)`` in float64."""
    for attempt in range(max_tries):
        inst = _draw(np.random.default_rng([seed, attempt]), seed, sizes, out_hw)
        if inst[-1] >= min_gap:
            return inst[:-1]
    raise RuntimeError("no draw met the argmax gap requirement")


def _draw(rng, seed, sizes, out_hw):
    corr_f = [rng.random((s, s, s, s)) for s in sizes]
    corr_b = [np.clip(c + 0.3 * rng.standard_normal(c.shape), 0, 1) for c in corr_f]
    target = (rng.random(out_hw) > 0.5).astype(np.float64)
    p = {k: v.astype(np.float64) for k, v in fusion.init_fusion(len(sizes), seed=seed).items()}
    margins = []
    gap = np.inf
    xs = {"f": [], "b": []}
    for l in range(len(sizes)):
        kq, ks = p[f"sep.{l}.kq"], p[f"sep.{l}.ks"]
        raw = {h: _sep_raw(c[l], kq, ks) for h, c in (("f", corr_f), ("b", corr_b))}
        for ch in range(kq.shape[0]):
            b, m = _gap_bias([raw["f"][ch], raw["b"][ch]])
            p[f"sep.{l}.b"][ch] = b
            margins.append(m)
        for h in "fb":
            out = np.maximum(raw[h] + p[f"sep.{l}.b"][:, None], 0).reshape((kq.shape[0],) + (sizes[l],) * 4)
            gap = min(gap, _top_gap(out))
            sq = fusion.squeeze_support(out)
            xs[h].append(bilinear_resize(sq, sizes[0], sizes[0]) if sq.shape[1] != sizes[0] else sq)
    x = {h: np.concatenate(xs[h]) for h in "fb"}
    for name in CONVS:
        w = p[f"{name}.w"]
        pre = {h: fusion._conv2d_forward(x[h], w, np.zeros(w.shape[0]))[0] for h in "fb"}
        for ch in range(w.shape[0]):
            b, m = _gap_bias([pre["f"][ch], pre["b"][ch]])
            p[f"{name}.b"][ch] = b
            margins.append(m)
        x = {h: np.maximum(pre[h] + p[f"{name}.b"].reshape(-1, 1, 1), 0) for h in "fb"}
    return corr_f, corr_b, p, target, min(margins), gap
