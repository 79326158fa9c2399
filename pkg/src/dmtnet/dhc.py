"""Dual hypercorrelation: fg and bg 4D cosine correlations in transformed space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dmtnet.errors import ShapeMismatch
from dmtnet.tensor import DTYPE, EPS_NORM, bilinear_resize


def mask_features(F: np.ndarray, M: np.ndarray):
    """Split features into (F * M, F * (1 - M)) with the mask broadcast over channels."""
    if F.shape[1:] != M.shape:
        raise ShapeMismatch(f"features {F.shape} vs mask {M.shape}")
    M = np.asarray(M, dtype=F.dtype)
    ff = F * M
    return ff, F - ff


def _unit_columns(X: np.ndarray):
    n = np.linalg.norm(X, axis=0)
    ok = n >= EPS_NORM
    Xh = np.where(ok, X / np.where(ok, n, 1.0), 0.0)
    return Xh, n, ok


@dataclass
class _CorrCache:
    Fs: np.ndarray  # C x Ns, float64
    Fq: np.ndarray  # C x Nq
    Uh: np.ndarray
    un: np.ndarray
    uok: np.ndarray
    Vh: np.ndarray
    vn: np.ndarray
    vok: np.ndarray
    cos: np.ndarray  # Nq x Ns
    shape: tuple


def _correlate(Fs, Fq, Ws, Wq, V=None):
    C, hs, ws = Fs.shape
    Cq, hq, wq = Fq.shape
    if C != Cq or Ws.shape != (C, C) or Wq.shape != (C, C):
        raise ShapeMismatch(f"support {Fs.shape}, query {Fq.shape}, W {Ws.shape}/{Wq.shape}")
    fs = np.asarray(Fs, dtype=np.float64).reshape(C, -1)
    fq = np.asarray(Fq, dtype=np.float64).reshape(C, -1)
    Uh, un, uok = _unit_columns(np.asarray(Ws, dtype=np.float64) @ fs)
    if V is None:
        V = _unit_columns(np.asarray(Wq, dtype=np.float64) @ fq)
    Vh, vn, vok = V
    cos = Vh.T @ Uh
    cache = _CorrCache(fs, fq, Uh, un, uok, Vh, vn, vok, cos, (hq, wq, hs, ws))
    return np.maximum(cos, 0.0).reshape(hq, wq, hs, ws), cache


def correlation4d(Fs, Fq, Ws, Wq, dtype=DTYPE) -> np.ndarray:
    """``ReLU(cos(Ws Fs(x_s, y_s), Wq Fq(x_q, y_q)))`` indexed ``[x_q, y_q, x_s, y_s]``.

    Zero-norm transformed vectors correlate to 0.
    """
    corr, _ = _correlate(Fs, Fq, Ws, Wq)
    return corr.astype(dtype)


def _corr_backward(cache: _CorrCache, dcorr: np.ndarray):
    hq, wq, hs, ws = cache.shape
    G = np.asarray(dcorr, dtype=np.float64).reshape(hq * wq, hs * ws) * (cache.cos > 0)
    dUh = cache.Vh @ G
    dVh = cache.Uh @ G.T
    dU = np.where(cache.uok, (dUh - cache.Uh * np.sum(cache.Uh * dUh, axis=0)) / np.where(cache.uok, cache.un, 1.0), 0.0)
    dV = np.where(cache.vok, (dVh - cache.Vh * np.sum(cache.Vh * dVh, axis=0)) / np.where(cache.vok, cache.vn, 1.0), 0.0)
    return dU @ cache.Fs.T, dV @ cache.Fq.T


@dataclass
class DhcOutput:
    corr_f: list[np.ndarray]
    corr_b: list[np.ndarray]
    caches: list[tuple[_CorrCache, _CorrCache]]


def dhc_forward(support_pyr, mask, query_pyr, Ws, Wq, dtype=DTYPE) -> DhcOutput:
    """Fg and bg correlation pyramids for one support shot (mask at image size)."""
    if not (len(support_pyr) == len(query_pyr) == len(Ws) == len(Wq)):
        raise ShapeMismatch("pyramids and transforms must have the same number of levels")
    mask = np.asarray(mask)
    corr_f, corr_b, caches = [], [], []
    for Fs, Fq, ws, wq in zip(support_pyr, query_pyr, Ws, Wq):
        h, w = Fs.shape[1:]
        Ml = bilinear_resize(mask.astype(Fs.dtype), h, w) if mask.shape != (h, w) else mask.astype(Fs.dtype)
        ff, fb = mask_features(Fs, Ml)
        cf, kf = _correlate(ff, Fq, ws, wq)
        cb, kb = _correlate(fb, Fq, ws, wq, V=(kf.Vh, kf.vn, kf.vok))
        corr_f.append(cf.astype(dtype))
        corr_b.append(cb.astype(dtype))
        caches.append((kf, kb))
    return DhcOutput(corr_f, corr_b, caches)


def dhc_backward(out: DhcOutput, dcorr_f, dcorr_b):
    """Gradients w.r.t. the per-level support and query transforms."""
    dWs, dWq = [], []
    for (kf, kb), gf, gb in zip(out.caches, dcorr_f, dcorr_b):
        s1, q1 = _corr_backward(kf, gf)
        s2, q2 = _corr_backward(kb, gb)
        dWs.append(s1 + s2)
        dWq.append(q1 + q2)
    return dWs, dWq
