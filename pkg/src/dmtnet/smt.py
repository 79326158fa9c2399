"""Self-matching transformation.

Per level: support prototypes (global and per grid tile) -> coarse query mask
by self-matching -> query prototypes -> prototype matrices -> transforms
``W = A C+`` mapping each image's prototypes onto trainable anchors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dmtnet.errors import (
    DimensionMismatch,
    EmptyMask,
    NoValidPrototypes,
    ShapeMismatch,
    ZeroPrototype,
)
from dmtnet.features import GROUPS, PyramidSpec
from dmtnet.tensor import DTYPE, EPS_NORM, bilinear_resize, cosine_matrix, pinv2, softmax_pair

MASK_EPS = 1e-6
COINCIDE_TOL = 1e-9
ROLES = ("support", "query")


@dataclass(frozen=True)
class SmtConfig:
    gamma: float = 0.25
    beta: float = 0.5
    ridge: float = 1e-6

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if abs(1 / self.gamma - round(1 / self.gamma)) > 1e-9:
            raise ValueError("1/gamma must be an integer")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")

    @property
    def grid(self) -> int:
        return int(round(1 / self.gamma))

    @property
    def tiles(self) -> int:
        return self.grid ** 2


@dataclass
class LocalPair:
    fg: np.ndarray | None
    bg: np.ndarray | None

    @property
    def valid(self) -> bool:
        return self.fg is not None and self.bg is not None


@dataclass
class LevelPrototypes:
    fg: np.ndarray
    bg: np.ndarray
    locals: list[LocalPair] = field(default_factory=list)


def masked_avg_pool(F: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Mask-weighted spatial mean of a ``C x H x W`` map (float64 result)."""
    F = np.asarray(F, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if F.shape[1:] != M.shape:
        raise ShapeMismatch(f"feature {F.shape} vs mask {M.shape}")
    total = M.sum()
    if total < MASK_EPS:
        raise EmptyMask("mask sums to zero")
    return np.tensordot(F, M, axes=([1, 2], [0, 1])) / total


def split_local(F: np.ndarray, M: np.ndarray, gamma: float):
    """Non-overlapping ``gamma*H x gamma*W`` tiles of (F, M) in row-major order."""
    inv = 1.0 / gamma
    n = int(round(inv))
    if abs(inv - n) > 1e-9 or n < 1:
        raise DimensionMismatch(f"1/gamma={inv:g} is not an integer")
    _, h, w = F.shape
    if h % n or w % n:
        raise DimensionMismatch(f"{h}x{w} map not divisible into {n}x{n} tiles")
    th, tw = h // n, w // n
    return [
        (F[:, r * th:(r + 1) * th, c * tw:(c + 1) * tw], M[r * th:(r + 1) * th, c * tw:(c + 1) * tw])
        for r in range(n) for c in range(n)
    ]


def _try_pool(F, M):
    try:
        return masked_avg_pool(F, M)
    except EmptyMask:
        return None


def local_prototypes(F: np.ndarray, M: np.ndarray, gamma: float) -> list[LocalPair]:
    """Per-tile fg/bg prototypes; a tile lacking fg (or bg) mass leaves that slot empty.

    Pairs whose fg and bg prototypes coincide (e.g. a one-pixel tile with a
    fractional mask value) carry no contrast and are dropped entirely.
    """
    out = []
    for Fp, Mp in split_local(F, M, gamma):
        pair = LocalPair(_try_pool(Fp, Mp), _try_pool(Fp, 1.0 - Mp))
        if pair.valid and _coincide(pair.fg, pair.bg):
            pair = LocalPair(None, None)
        out.append(pair)
    return out


def _coincide(a: np.ndarray, b: np.ndarray) -> bool:
    return np.linalg.norm(a - b) <= COINCIDE_TOL * max(np.linalg.norm(a), np.linalg.norm(b), EPS_NORM)


def level_prototypes(F: np.ndarray, M: np.ndarray, gamma: float) -> LevelPrototypes:
    return LevelPrototypes(masked_avg_pool(F, M), masked_avg_pool(F, 1.0 - M), local_prototypes(F, M, gamma))


def average_prototypes(protos: list[LevelPrototypes]) -> LevelPrototypes:
    """Shot-average of prototypes; local slots average over the shots where they exist."""
    if len(protos) == 1:
        return protos[0]
    fg = np.mean([p.fg for p in protos], axis=0)
    bg = np.mean([p.bg for p in protos], axis=0)
    locs = []
    for slot in zip(*(p.locals for p in protos)):
        fgs = [s.fg for s in slot if s.fg is not None]
        bgs = [s.bg for s in slot if s.bg is not None]
        locs.append(LocalPair(np.mean(fgs, axis=0) if fgs else None, np.mean(bgs, axis=0) if bgs else None))
    return LevelPrototypes(fg, bg, locs)


def self_match(Fq: np.ndarray, locals_: list[LocalPair], global_pair=None):
    """Coarse (fg, bg) probability maps of the query from local prototype pairs.

    Each valid pair gives per-pixel cosine maps against its fg and bg
    prototype; the two maps are normalized jointly by a two-way softmax and
    the resulting probabilities are averaged over pairs. Without valid pairs
    the global pair is used.
    """
    pairs = [(p.fg, p.bg) for p in locals_ if p.valid]
    if not pairs:
        if global_pair is None:
            raise NoValidPrototypes("no valid local pair and no global fallback")
        pairs = [tuple(global_pair)]
    C, h, w = Fq.shape
    flat = np.asarray(Fq, dtype=np.float64).reshape(C, h * w)
    fg_p = np.stack([p[0] for p in pairs], axis=1)
    bg_p = np.stack([p[1] for p in pairs], axis=1)
    cos_f = cosine_matrix(fg_p, flat)
    cos_b = cosine_matrix(bg_p, flat)
    pf, pb = softmax_pair(cos_f, cos_b)
    return pf.mean(axis=0).reshape(h, w), pb.mean(axis=0).reshape(h, w)


def query_prototypes(Fq: np.ndarray, fg: np.ndarray, bg: np.ndarray):
    """Soft masked-average-pooled query prototypes weighted by coarse probabilities."""
    return masked_avg_pool(Fq, fg), masked_avg_pool(Fq, bg)


def build_prototype_matrix(c_f, c_b) -> np.ndarray:
    """``C x 2`` matrix of unit-normalized fg and bg prototypes."""
    c_f = np.asarray(c_f, dtype=np.float64)
    c_b = np.asarray(c_b, dtype=np.float64)
    nf, nb = np.linalg.norm(c_f), np.linalg.norm(c_b)
    if nf < EPS_NORM or nb < EPS_NORM:
        raise ZeroPrototype(f"prototype norm too small (fg={nf:.2e}, bg={nb:.2e})")
    return np.stack([c_f / nf, c_b / nb], axis=1)


def blend_pinv(cq_plus: np.ndarray, cs_plus: np.ndarray, beta: float) -> np.ndarray:
    if cq_plus.shape != cs_plus.shape:
        raise ShapeMismatch(f"{cq_plus.shape} vs {cs_plus.shape}")
    return beta * cq_plus + (1.0 - beta) * cs_plus


def solve_transform(A: np.ndarray, c_plus: np.ndarray) -> np.ndarray:
    if A.shape[1] != c_plus.shape[0] or A.shape[0] != c_plus.shape[1]:
        raise ShapeMismatch(f"A {A.shape} and C+ {c_plus.shape} do not conform")
    return A @ c_plus


def apply_transform(W: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Per-pixel matrix-vector product ``W F(x, y)``."""
    if W.shape[1] != F.shape[0]:
        raise ShapeMismatch(f"W {W.shape} vs features {F.shape}")
    return np.tensordot(W, F, axes=(1, 0)).astype(np.result_type(W.dtype, F.dtype))


# --- anchors ----------------------------------------------------------------

def anchor_name(role: str, group: str, kind: str) -> str:
    return f"anchor.{role}.{group}.{kind}"


def group_channels(spec: PyramidSpec) -> dict[str, int]:
    out = {}
    for l in range(spec.levels):
        g = spec.group(l)
        if out.setdefault(g, spec.channels[l]) != spec.channels[l]:
            raise DimensionMismatch(f"levels in anchor group {g!r} disagree on channel count")
    return out


def init_anchors(spec: PyramidSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded unit-variance Gaussian anchors, one fg/bg pair per (role, group)."""
    rng = np.random.default_rng(seed)
    out = {}
    for role in ROLES:
        for g, c in group_channels(spec).items():
            for kind in ("fg", "bg"):
                out[anchor_name(role, g, kind)] = rng.standard_normal(c).astype(DTYPE)
    return out


def anchor_matrix(anchors, role: str, group: str) -> np.ndarray:
    a_f = np.asarray(anchors[anchor_name(role, group, "fg")], dtype=np.float64)
    a_b = np.asarray(anchors[anchor_name(role, group, "bg")], dtype=np.float64)
    try:
        return build_prototype_matrix(a_f, a_b)
    except ZeroPrototype as exc:
        raise ZeroPrototype(f"anchor {role}/{group}: {exc}") from None


# --- forward / backward -----------------------------------------------------

@dataclass
class SmtLevel:
    group: str
    Ws: np.ndarray
    Wq: np.ndarray
    Cs: np.ndarray
    Cq: np.ndarray
    Cs_plus: np.ndarray
    Cq_plus: np.ndarray
    Cq_plus_blend: np.ndarray
    As: np.ndarray
    Aq: np.ndarray
    coarse_fg: np.ndarray
    coarse_bg: np.ndarray
    support: LevelPrototypes
    query_fg: np.ndarray
    query_bg: np.ndarray


@dataclass
class SmtOutput:
    levels: list[SmtLevel]

    @property
    def Ws(self):
        return [lv.Ws for lv in self.levels]

    @property
    def Wq(self):
        return [lv.Wq for lv in self.levels]

    @property
    def coarse(self):
        return [(lv.coarse_fg, lv.coarse_bg) for lv in self.levels]


def smt_forward(support_pyrs, support_masks, query_pyr, anchors, spec: PyramidSpec,
                cfg: SmtConfig = SmtConfig()) -> SmtOutput:
    """Transforms for one query given K support shots (pyramids + image-size masks)."""
    if len(support_pyrs) != len(support_masks) or not support_pyrs:
        raise ShapeMismatch("need one mask per support pyramid and K >= 1")
    levels = []
    for l in range(spec.levels):
        Fq = query_pyr[l]
        _, h, w = Fq.shape
        shots = []
        for pyr, mask in zip(support_pyrs, support_masks):
            if pyr[l].shape != Fq.shape:
                raise ShapeMismatch(f"level {l}: support {pyr[l].shape} vs query {Fq.shape}")
            Ml = bilinear_resize(np.asarray(mask, dtype=DTYPE), h, w).astype(np.float64)
            shots.append(level_prototypes(pyr[l], Ml, cfg.gamma))
        protos = average_prototypes(shots)
        fg, bg = self_match(Fq, protos.locals, (protos.fg, protos.bg))
        qf, qb = query_prototypes(Fq, fg, bg)

        g = spec.group(l)
        Cs = build_prototype_matrix(protos.fg, protos.bg)
        Cq = build_prototype_matrix(qf, qb)
        Cs_plus = pinv2(Cs, cfg.ridge)
        Cq_plus = pinv2(Cq, cfg.ridge)
        Cq_blend = blend_pinv(Cq_plus, Cs_plus, cfg.beta)
        As = anchor_matrix(anchors, "support", g)
        Aq = anchor_matrix(anchors, "query", g)
        levels.append(SmtLevel(
            group=g, Ws=solve_transform(As, Cs_plus), Wq=solve_transform(Aq, Cq_blend),
            Cs=Cs, Cq=Cq, Cs_plus=Cs_plus, Cq_plus=Cq_plus, Cq_plus_blend=Cq_blend,
            As=As, Aq=Aq, coarse_fg=fg, coarse_bg=bg, support=protos, query_fg=qf, query_bg=qb,
        ))
    return SmtOutput(levels)


def identity_transforms(spec: PyramidSpec):
    return [np.eye(c) for c in spec.channels]


def _normalize_backward(a: np.ndarray, grad_hat: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a)
    ah = a / n
    return (grad_hat - ah * (ah @ grad_hat)) / n


def smt_backward(out: SmtOutput, dWs, dWq, anchors) -> dict[str, np.ndarray]:
    """Gradients w.r.t. the raw anchor vectors given gradients on every W.

    Prototype matrices depend only on frozen features, so ``dA = dW (C+)^T``.
    """
    grads: dict[str, np.ndarray] = {}
    for lv, gs, gq in zip(out.levels, dWs, dWq):
        for role, dW, c_plus in (("support", gs, lv.Cs_plus), ("query", gq, lv.Cq_plus_blend)):
            if dW is None:
                continue
            dA = np.asarray(dW, dtype=np.float64) @ c_plus.T
            for col, kind in enumerate(("fg", "bg")):
                name = anchor_name(role, lv.group, kind)
                a = np.asarray(anchors[name], dtype=np.float64)
                g = _normalize_backward(a, dA[:, col])
                grads[name] = grads.get(name, 0.0) + g
    return grads
