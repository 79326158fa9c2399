"""Numerical primitives and the DMT1 binary tensor format.

Tensors are plain ``numpy.ndarray`` objects stored as float32, row-major.
Helpers that need extra precision accumulate in float64 internally and cast
the result back.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from dmtnet.errors import MalformedHeader, SingularPrototypeMatrix, TruncatedPayload

DTYPE = np.float32
MAGIC = b"DMT1"
EPS_NORM = 1e-8
DEFAULT_RIDGE = 1e-6
SINGULAR_TOL = 1e-12


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix R (n_out x n_in) for 1-D half-pixel bilinear resampling.

    Source coordinate is ``(dst + 0.5) * n_in / n_out - 0.5`` clamped to
    ``[0, n_in - 1]``.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be >= 1")
    R = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for d in range(n_out):
        src = min(max((d + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        R[d, i0] += 1.0 - w
        R[d, i1] += w
    return R


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a ``C x H x W`` (or ``H x W``) array with half-pixel bilinear sampling."""
    squeeze = src.ndim == 2
    x = src[None] if squeeze else src
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        out = x.copy()
    else:
        rh = resize_matrix(h, out_h)
        rw = resize_matrix(w, out_w)
        out = np.einsum("oh,chw,pw->cop", rh, x.astype(np.float64), rw)
        # convex combinations may drift by one ulp; keep within source bounds
        out = np.clip(out, x.min(), x.max())
    out = out.astype(src.dtype if src.dtype == np.float64 else DTYPE)
    return out[0] if squeeze else out


def bilinear_resize_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of :func:`bilinear_resize` (ignores the bound clipping)."""
    squeeze = grad_out.ndim == 2
    g = grad_out[None] if squeeze else grad_out
    _, oh, ow = g.shape
    if (oh, ow) == (in_h, in_w):
        out = g.copy()
    else:
        rh = resize_matrix(in_h, oh)
        rw = resize_matrix(in_w, ow)
        out = np.einsum("oh,cop,pw->chw", rh, g, rw).astype(g.dtype)
    return out[0] if squeeze else out


def cosine_sim(u, v) -> float:
    """Cosine similarity; 0 if either vector has norm below 1e-8."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < EPS_NORM or nv < EPS_NORM:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine between the columns of ``a`` (C x N) and ``b`` (C x M), float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    ah = np.where(na >= EPS_NORM, a / np.maximum(na, EPS_NORM), 0.0)
    bh = np.where(nb >= EPS_NORM, b / np.maximum(nb, EPS_NORM), 0.0)
    return np.clip(ah.T @ bh, -1.0, 1.0)


def softmax_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two-way softmax applied position-wise to the logit pair ``(a, b)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    pa = 0.5 * (1.0 + np.tanh(0.5 * d))
    pb = 0.5 * (1.0 + np.tanh(-0.5 * d))
    return pa, pb


def pinv2(C: np.ndarray, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """Left generalized inverse ``(C^T C + ridge I)^-1 C^T`` of a ``n x 2`` matrix.

    Raises SingularPrototypeMatrix when the smallest eigenvalue of the
    regularized Gram matrix falls below 1e-12, i.e. ``sigma_min(C)^2 + ridge < 1e-12``.
    """
    C64 = np.asarray(C, dtype=np.float64)
    if C64.ndim != 2 or C64.shape[1] != 2 or C64.shape[0] < 2:
        raise ValueError(f"expected an n x 2 matrix with n >= 2, got {C64.shape}")
    sigma_min = np.linalg.svd(C64, compute_uv=False)[-1]
    if sigma_min * sigma_min + ridge < SINGULAR_TOL:
        raise SingularPrototypeMatrix(
            f"prototype matrix is singular (sigma_min={sigma_min:.3e}, ridge={ridge:g})"
        )
    gram = C64.T @ C64 + ridge * np.eye(2)
    out = np.linalg.solve(gram, C64.T)
    return out if np.asarray(C).dtype == np.float64 else out.astype(DTYPE)


def write_tensor(path, t: np.ndarray) -> None:
    t = as_tensor(t)
    if not 1 <= t.ndim <= 4:
        raise ValueError(f"DMT1 supports rank 1-4, got rank {t.ndim}")
    header = MAGIC + struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(t.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode_tensor(raw, name=os.fspath(path))


def decode_tensor(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise MalformedHeader(f"{name}: bad magic {raw[:4]!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if not 1 <= rank <= 4:
        raise MalformedHeader(f"{name}: unsupported rank {rank}")
    if len(raw) < 8 + 4 * rank:
        raise MalformedHeader(f"{name}: header truncated")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    if any(d == 0 for d in dims):
        raise MalformedHeader(f"{name}: zero-sized dimension in {dims}")
    offset = 8 + 4 * rank
    n = int(np.prod(dims))
    payload = raw[offset:]
    if len(payload) < 4 * n:
        raise TruncatedPayload(f"{name}: expected {4 * n} payload bytes, found {len(payload)}")
    if len(payload) > 4 * n:
        raise MalformedHeader(f"{name}: {len(payload) - 4 * n} trailing bytes")
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(dims)
