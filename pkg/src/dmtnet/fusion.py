"""Correlation fusion network: separable 4D conv per level, support squeezing,
2D fusion convs and a 2D decoder, with hand-written reverse-mode gradients.

Both heads share parameters: the fg head consumes the fg correlation pyramid
and the bg head the bg pyramid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dmtnet.errors import ShapeMismatch, StaleCache
from dmtnet.tensor import DTYPE, bilinear_resize, bilinear_resize_backward

SEP_CHANNELS = 4
SQUEEZED = 2 * SEP_CHANNELS
HIDDEN = 16
DECODER = 8
OFFSETS = [(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)]


def init_fusion(levels: int, seed: int = 0, hidden: int = HIDDEN) -> dict[str, np.ndarray]:
    """Gaussian weights with std 1/sqrt(fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    p = {}
    for l in range(levels):
        p[f"sep.{l}.kq"] = rng.standard_normal((SEP_CHANNELS, 3, 3)) / 3.0
        p[f"sep.{l}.ks"] = rng.standard_normal((SEP_CHANNELS, 3, 3)) / 3.0
        p[f"sep.{l}.b"] = np.zeros(SEP_CHANNELS)
    shapes = {"conv1": (hidden, SQUEEZED * levels), "conv2": (hidden, hidden),
              "conv3": (DECODER, hidden), "conv4": (1, DECODER)}
    for name, (cout, cin) in shapes.items():
        p[f"{name}.w"] = rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(9 * cin)
        p[f"{name}.b"] = np.zeros(cout)
    return {k: v.astype(DTYPE) for k, v in p.items()}


def fusion_levels(params) -> int:
    return sum(1 for k in params if k.endswith(".kq"))


# --- shifts and convolutions --------------------------------------------------

def _shift(a: np.ndarray, di: int, dj: int, ax0: int) -> np.ndarray:
    """``out[.., x, y, ..] = a[.., x + di, y + dj, ..]`` on axes (ax0, ax0 + 1), zero-filled."""
    out = np.zeros_like(a)
    n0, n1 = a.shape[ax0], a.shape[ax0 + 1]
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    for ax, d, n in ((ax0, di, n0), (ax0 + 1, dj, n1)):
        if abs(d) >= n:
            return out
        src[ax] = slice(max(d, 0), n + min(d, 0))
        dst[ax] = slice(max(-d, 0), n - max(d, 0))
    out[tuple(dst)] = a[tuple(src)]
    return out


def sep4d_conv(corr, kq, ks, bias):
    """Separable 4D convolution of a ``Hq x Wq x Hs x Ws`` tensor into 4 channels + ReLU.

    Each channel convolves the query axes with ``kq[c]`` then the support
    axes with ``ks[c]`` (3x3 cross-correlation, zero padding 1).
    """
    return _sep4d_forward(corr, kq, ks, bias)[0]


def _sep4d_forward(corr, kq, ks, bias):
    dt = np.result_type(corr.dtype, kq.dtype)
    corr = np.asarray(corr, dtype=dt)
    S = np.stack([_shift(corr, i, j, 0) for i, j in OFFSETS])  # 9 x H x W x H x W
    T = np.tensordot(np.asarray(kq, dt).reshape(-1, 9), S, axes=(1, 0))  # c x ...
    TS = np.stack([_shift(T, i, j, 3) for i, j in OFFSETS])  # 9 x c x ...
    c = T.shape[0]
    Y = np.einsum("cn,ncx->cx", np.asarray(ks, dt).reshape(c, 9), TS.reshape(9, c, -1)).reshape(T.shape)
    Y += np.asarray(bias, dt).reshape(-1, 1, 1, 1, 1)
    out = np.maximum(Y, 0.0)
    return out, (S, TS, Y > 0)


def _sep4d_backward(cache, kq, ks, dout):
    S, TS, active = cache
    dY = dout * active
    c = dY.shape[0]
    dks = np.einsum("cx,ncx->cn", dY.reshape(c, -1), TS.reshape(9, c, -1)).reshape(ks.shape)
    db = dY.reshape(dY.shape[0], -1).sum(axis=1)
    ksf = np.asarray(ks, dY.dtype).reshape(-1, 9)
    dT = np.zeros_like(dY)
    for n, (i, j) in enumerate(OFFSETS):
        dT += ksf[:, n].reshape(-1, 1, 1, 1, 1) * _shift(dY, -i, -j, 3)
    dkq = np.tensordot(dT, S, axes=(list(range(1, 5)), list(range(1, 5)))).reshape(kq.shape)
    G = np.tensordot(np.asarray(kq, dY.dtype).reshape(-1, 9), dT, axes=(0, 0))  # 9 x ...
    dcorr = np.zeros(dY.shape[1:], dtype=dY.dtype)
    for n, (i, j) in enumerate(OFFSETS):
        dcorr += _shift(G[n], -i, -j, 0)
    return dkq, dks, db, dcorr


def squeeze_support(t: np.ndarray) -> np.ndarray:
    """Mean and max over the support axes: ``c x Hq x Wq x Hs x Ws -> 2c x Hq x Wq``."""
    return _squeeze_forward(t)[0]


def _squeeze_forward(t):
    c, hq, wq, hs, ws = t.shape
    flat = t.reshape(c, hq, wq, hs * ws)
    arg = flat.argmax(axis=-1)
    mx = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.concatenate([flat.mean(axis=-1), mx]), arg


def _squeeze_backward(arg, shape, dout):
    c, hq, wq, hs, ws = shape
    n = hs * ws
    g = np.repeat((dout[:c] / n)[..., None], n, axis=-1)
    np.put_along_axis(g, arg[..., None], np.take_along_axis(g, arg[..., None], -1) + dout[c:, ..., None], -1)
    return g.reshape(shape)


def _conv2d_forward(x, w, b):
    cin, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((cin, 3, 3, h, wd), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, i:i + h, j:j + wd]
    y = np.tensordot(w, cols, axes=([1, 2, 3], [0, 1, 2])) + b.reshape(-1, 1, 1)
    return y, cols


def _conv2d_backward(cols, w, dy):
    dw = np.tensordot(dy, cols, axes=([1, 2], [3, 4]))
    db = dy.sum(axis=(1, 2))
    dcols = np.tensordot(w, dy, axes=(0, 0))  # cin x 3 x 3 x h x w
    cin, _, _, h, wd = dcols.shape
    dxp = np.zeros((cin, h + 2, wd + 2), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd] += dcols[:, i, j]
    return dxp[:, 1:-1, 1:-1], dw, db


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- full head --------------------------------------------------------------

@dataclass
class HeadOutput:
    M_f: np.ndarray | None
    M_b: np.ndarray | None


@dataclass
class FusionCache:
    params: dict
    heads: dict
    out_hw: tuple[int, int]


def _param(params, name, dt):
    return np.asarray(params[name], dtype=dt)


def _head_forward(corrs, params, out_hw, dt):
    levels = len(corrs)
    h1, w1 = corrs[0].shape[:2]
    feats, lcache = [], []
    for l, corr in enumerate(corrs):
        if corr.ndim != 4 or corr.shape[:2] != corr.shape[2:]:
            raise ShapeMismatch(f"level {l}: correlation shape {corr.shape}")
        sep, sc = _sep4d_forward(np.asarray(corr, dt), _param(params, f"sep.{l}.kq", dt),
                                 _param(params, f"sep.{l}.ks", dt), _param(params, f"sep.{l}.b", dt))
        sq, arg = _squeeze_forward(sep)
        feats.append(bilinear_resize(sq, h1, w1) if sq.shape[1:] != (h1, w1) else sq)
        lcache.append((sc, arg, sep.shape, sq.shape[1:]))
    x = np.concatenate(feats)
    if x.shape[0] != params["conv1.w"].shape[1]:
        raise ShapeMismatch(f"{levels} levels do not match conv1 input width {params['conv1.w'].shape[1]}")
    acts, cols = [], []
    for name in ("conv1", "conv2", "conv3", "conv4"):
        y, c = _conv2d_forward(x, _param(params, f"{name}.w", dt), _param(params, f"{name}.b", dt))
        cols.append(c)
        if name != "conv4":
            acts.append(y > 0)
            x = np.maximum(y, 0.0)
        else:
            x = y
    p = _sigmoid(x)
    out = bilinear_resize(p, *out_hw)[0] if p.shape[1:] != tuple(out_hw) else p[0].copy()
    return out, {"levels": lcache, "cols": cols, "acts": acts, "p": p}


def _head_backward(hc, params, dout, dt):
    p = hc["p"]
    h1, w1 = p.shape[1:]
    dp = bilinear_resize_backward(dout[None].astype(dt), h1, w1) if dout.shape != (h1, w1) else dout[None].astype(dt)
    dx = dp * p * (1.0 - p)
    grads = {}
    for k, name in reversed(list(enumerate(("conv1", "conv2", "conv3", "conv4")))):
        if name != "conv4":
            dx = dx * hc["acts"][k]
        dx, grads[f"{name}.w"], grads[f"{name}.b"] = _conv2d_backward(hc["cols"][k], _param(params, f"{name}.w", dt), dx)
    dcorrs = []
    for l, (sc, arg, sep_shape, sq_hw) in enumerate(hc["levels"]):
        dsq = dx[SQUEEZED * l:SQUEEZED * (l + 1)]
        if sq_hw != (h1, w1):
            dsq = bilinear_resize_backward(dsq, *sq_hw)
        dsep = _squeeze_backward(arg, sep_shape, dsq)
        dkq, dks, db, dcorr = _sep4d_backward(sc, _param(params, f"sep.{l}.kq", dt),
                                              _param(params, f"sep.{l}.ks", dt), dsep)
        grads[f"sep.{l}.kq"], grads[f"sep.{l}.ks"], grads[f"sep.{l}.b"] = dkq, dks, db
        dcorrs.append(dcorr)
    return grads, dcorrs


def fusion_forward(corr_f, corr_b, params, out_hw, heads=("f", "b")):
    """Run the shared network on the fg and/or bg correlation pyramid.

    Returns ``(HeadOutput, FusionCache)``; masks are at ``out_hw`` resolution.
    Computation uses float64 when the correlations or parameters are float64.
    """
    dt = np.result_type(np.asarray(params["conv1.w"]).dtype,
                        *[np.asarray(c).dtype for c in (corr_f or corr_b or [])])
    outs, hcs = {}, {}
    for head, corrs in (("f", corr_f), ("b", corr_b)):
        if head in heads:
            outs[head], hcs[head] = _head_forward(corrs, params, tuple(out_hw), dt)
    cache = FusionCache(params={k: params[k] for k in params if not k.startswith("anchor.")},
                        heads=hcs, out_hw=tuple(out_hw))
    return HeadOutput(outs.get("f"), outs.get("b")), cache


def fusion_backward(cache: FusionCache, dM_f, dM_b, params=None):
    """Parameter gradients plus gradients w.r.t. both correlation pyramids.

    ``params`` (if given) must be the very arrays used in the forward pass;
    replaced or resized tensors raise StaleCache.
    """
    if params is not None:
        for k, v in cache.params.items():
            if params.get(k) is not v:
                raise StaleCache(f"parameter {k!r} changed since the forward pass")
    params = cache.params
    grads: dict[str, np.ndarray] = {}
    dcorr = {"f": None, "b": None}
    for head, d in (("f", dM_f), ("b", dM_b)):
        if d is None:
            continue
        if head not in cache.heads:
            raise StaleCache(f"head {head!r} was not computed in the forward pass")
        hc = cache.heads[head]
        dt = hc["p"].dtype
        g, dcorr[head] = _head_backward(hc, params, np.asarray(d, dtype=dt), dt)
        for k, v in g.items():
            grads[k] = grads[k] + v if k in grads else v
    for k, v in params.items():
        grads.setdefault(k, np.zeros_like(v))
    return grads, dcorr["f"], dcorr["b"]
