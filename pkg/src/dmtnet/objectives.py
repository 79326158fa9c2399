"""Losses, their gradients, Adam, and a central-difference gradient checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dmtnet.errors import NonFiniteLoss, ShapeMismatch
from dmtnet.tensor import bilinear_resize

CLIP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 0.5

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be non-negative")


def bce(pred, target) -> float:
    """Mean binary cross-entropy; predictions clipped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs target {t.shape}")
    p = np.clip(p, CLIP, 1.0 - CLIP)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log1p(-p))))


def bce_grad(pred, target) -> np.ndarray:
    """d bce / d pred; zero where the clip is active."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs target {t.shape}")
    inside = (p > CLIP) & (p < 1.0 - CLIP)
    pc = np.clip(p, CLIP, 1.0 - CLIP)
    return np.where(inside, (pc - t) / (pc * (1.0 - pc)), 0.0) / p.size


def loss_coarse(coarse_fg, query_mask) -> float:
    """Mean over levels of BCE between the coarse fg map and the resized query mask."""
    vals = []
    for fg in coarse_fg:
        h, w = fg.shape
        target = bilinear_resize(np.asarray(query_mask, dtype=np.float32), h, w)
        vals.append(bce(fg, target))
    return float(np.mean(vals))


def loss_dual(M_f, M_b, M_q, weights: LossWeights = LossWeights()) -> float:
    M_q = np.asarray(M_q, dtype=np.float64)
    return bce(M_f, M_q) + weights.alpha1 * bce(M_b, 1.0 - M_q)


def loss_dual_grad(M_f, M_b, M_q, weights: LossWeights = LossWeights()):
    M_q = np.asarray(M_q, dtype=np.float64)
    return bce_grad(M_f, M_q), weights.alpha1 * bce_grad(M_b, 1.0 - M_q)


def loss_total(l1: float, l2: float, weights: LossWeights = LossWeights()) -> float:
    return weights.alpha2 * l1 + l2


def loss_tsf(pred_support, gt_support) -> float:
    """Mean of per-shot BCEs between predicted and ground-truth support masks."""
    if len(pred_support) != len(gt_support) or not pred_support:
        raise ShapeMismatch("need K >= 1 predictions matching the ground-truth shots")
    return float(np.mean([bce(p, t) for p, t in zip(pred_support, gt_support)]))


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimState, names=None) -> dict:
    """One bias-corrected Adam update of ``params[names]``; returns a new dict.

    Updated tensors are fresh arrays; untouched tensors keep their identity.
    """
    if state.lr < 0:
        raise ValueError("learning rate must be >= 0")
    names = list(grads) if names is None else list(names)
    state.t += 1
    b1t = 1.0 - state.beta1 ** state.t
    b2t = 1.0 - state.beta2 ** state.t
    out = dict(params)
    for k in names:
        p = np.asarray(params[k])
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {k!r}: {g.shape} vs parameter {p.shape}")
        m = state.beta1 * state.m.get(k, 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(k, 0.0) + (1.0 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        if state.lr == 0:
            continue
        step = state.lr * (m / b1t) / (np.sqrt(v / b2t) + state.eps)
        out[k] = (p - step).astype(p.dtype)
    return out


def fd_gradcheck(fn, params: dict, grads: dict, h: float = 1e-3, coords=None) -> float:
    """Max relative error between ``grads`` and central differences of ``fn``.

    ``coords`` optionally maps names to flat indices to check; by default
    every coordinate is checked. Relative error is measured against the
    numerical derivative: ``|analytic - numeric| / max(|numeric|, 1e-8)``.
    """
    worst = 0.0
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for name in (coords or grads):
        flat = work[name].reshape(-1)
        idx = range(flat.size) if coords is None else coords[name]
        analytic = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(work)
            flat[i] = orig - h
            fm = fn(work)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteLoss(f"non-finite loss perturbing {name}[{i}]")
            num = (fp - fm) / (2 * h)
            a = analytic[i]
            err = abs(a - num) / max(abs(num), 1e-8)
            worst = max(worst, err)
    return worst
