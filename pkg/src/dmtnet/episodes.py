"""Episode execution, meta-training, test-time self-finetuning and evaluation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dmtnet.data import Dataset, Episode, EpisodeSpec, Sample, sample_episode, write_pgm
from dmtnet.errors import NonFiniteLoss, ShapeMismatch
from dmtnet.model import DMTNet, binarize, save_checkpoint
from dmtnet.objectives import (
    OptimState,
    adam_step,
    bce,
    bce_grad,
    loss_coarse,
    loss_dual,
    loss_dual_grad,
    loss_total,
)
from dmtnet.smt import apply_transform, smt_forward

log = logging.getLogger(__name__)

# learning rates used by the original experiments, per target dataset
TSF_LR_PRESETS = {"isic": 1e-6, "deepglobe": 1e-6, "fss1000": 1e-6, "chest_xray": 1e-1}
REFERENCE_SCALE = {"image_size": 400, "test_episodes": 1200, "test_episodes_fss1000": 2400, "epochs": 19, "lr": 1e-3}


@dataclass(frozen=True)
class TsfConfig:
    steps: int = 40
    lr: float = 1e-3
    group: str = "encoder"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class EpisodeResult:
    pred: list[np.ndarray]
    iou: list[float]
    l1: float
    l2: float
    total: float
    grads: dict | None = None
    tsf_before: float = float("nan")
    tsf_after: float = float("nan")
    seconds: float = 0.0

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou))


def iou(pred, gt) -> float:
    """Intersection over union of binary masks; two empty masks score 1."""
    p = np.asarray(pred) >= 0.5
    g = np.asarray(gt) >= 0.5
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


class PyramidCache:
    """Memoizes feature pyramids per sample object for one model's extractor."""

    def __init__(self, model: DMTNet):
        self.model = model
        self._store: dict[int, tuple[Sample, list]] = {}

    def __call__(self, s: Sample):
        hit = self._store.get(id(s))
        if hit is None or hit[0] is not s:
            hit = (s, self.model.pyramid(s.image))
            self._store[id(s)] = hit
        return hit[1]


def run_episode(model: DMTNet, episode: Episode, mode: str = "eval", combine: str = "f",
                pyramids=None, bypass_smt: bool = False) -> EpisodeResult:
    """Predict every query of an episode; in ``train`` mode also return gradients of
    the mean total loss over queries."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    t0 = time.perf_counter()
    pyr = pyramids or PyramidCache(model)
    s_pyrs = [pyr(s) for s in episode.support]
    s_masks = [s.mask for s in episode.support]
    preds, ious, l1s, l2s = [], [], [], []
    grads = None
    nq = len(episode.query)
    for q in episode.query:
        state = model.forward(s_pyrs, s_masks, pyr(q), q.mask.shape, bypass_smt=bypass_smt)
        l1 = loss_coarse([fg for fg, _ in state.smt.coarse], q.mask)
        l2 = loss_dual(state.M_f, state.M_b, q.mask, model.weights)
        l1s.append(l1)
        l2s.append(l2)
        pred = binarize(state.M_f, state.M_b, combine)
        preds.append(pred)
        ious.append(iou(pred, q.mask))
        if mode == "train":
            # the coarse loss depends on frozen features only, so it adds no gradient
            gf, gb = loss_dual_grad(state.M_f, state.M_b, q.mask, model.weights)
            g = model.backward(state, gf / nq, gb / nq)
            grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    l1, l2 = float(np.mean(l1s)), float(np.mean(l2s))
    return EpisodeResult(preds, ious, l1, l2, loss_total(l1, l2, model.weights), grads,
                         seconds=time.perf_counter() - t0)


# --- meta-training -----------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def smoothed(self, key: str = "total", window: int = 50) -> np.ndarray:
        x = np.array([r[key] for r in self.rows], dtype=np.float64)
        if x.size == 0:
            return x
        c = np.cumsum(np.insert(x, 0, 0.0))
        idx = np.arange(1, x.size + 1)
        lo = np.maximum(idx - window, 0)
        return (c[idx] - c[lo]) / (idx - lo)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["episode", "class", "l1", "l2", "total", "iou"], lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})


def meta_train(model: DMTNet, dataset: Dataset, episodes: int, spec: EpisodeSpec = EpisodeSpec(),
               lr: float = 1e-3, seed: int = 0, start_episode: int = 0, optim: OptimState | None = None,
               group: str = "all", dump_dir=None, log_every: int = 50):
    """Episodic training of anchors and fusion parameters on the total loss.

    Returns ``(model, optim_state, TrainLog)``; ``model`` is updated in place.
    Episode ``i`` draws from ``rng([seed, i])`` so a resumed run continues the
    same episode stream.
    """
    optim = optim or OptimState(lr=lr)
    optim.lr = lr
    names = model.group_names(group)
    cache = PyramidCache(model)
    tlog = TrainLog()
    for i in range(start_episode, start_episode + episodes):
        ep = sample_episode(dataset, spec, np.random.default_rng([seed, i]))
        res = run_episode(model, ep, "train", pyramids=cache)
        if not math.isfinite(res.total) or not all(np.all(np.isfinite(g)) for g in res.grads.values()):
            if dump_dir is not None:
                Path(dump_dir).mkdir(parents=True, exist_ok=True)
                diag = {"episode": i, "class": ep.cls, "support": ep.support_idx, "query": ep.query_idx,
                        "l1": res.l1, "l2": res.l2, "total": res.total}
                (Path(dump_dir) / "nonfinite_dump.json").write_text(json.dumps(diag, indent=2, default=str))
            raise NonFiniteLoss(f"non-finite loss at episode {i}: L1={res.l1} L2={res.l2}")
        model.params = adam_step(model.params, res.grads, optim, names)
        tlog.rows.append({"episode": i, "class": ep.cls, "l1": res.l1, "l2": res.l2,
                          "total": res.total, "iou": res.mean_iou})
        if log_every and (i + 1) % log_every == 0:
            sm = tlog.smoothed()[-1]
            log.info("episode %d  total %.4f (smoothed %.4f)  iou %.3f", i + 1, res.total, sm, res.mean_iou)
    return model, optim, tlog


# --- test-time self-finetuning ---------------------------------------------------------

def _tsf_loss(model: DMTNet, pyrs, support, grads: bool, anchors: bool):
    k = len(support)
    preds, total, acc = [], 0.0, None
    for i, shot in enumerate(support):
        ctx = [i] if k == 1 else [j for j in range(k) if j != i]
        state = model.forward([pyrs[j] for j in ctx], [support[j].mask for j in ctx], pyrs[i],
                              shot.mask.shape, heads=("f",))
        preds.append(state.M_f)
        total += bce(state.M_f, shot.mask) / k
        if grads:
            g = model.backward(state, bce_grad(state.M_f, shot.mask) / k, None, anchors=anchors)
            acc = g if acc is None else {n: acc[n] + g[n] for n in acc}
    return total, acc


def tsf_finetune(model: DMTNet, support: list[Sample], cfg: TsfConfig = TsfConfig(), pyramids=None):
    """Tune one parameter group on the support shots, then hand back a frozen copy.

    K=1: the shot is predicted from itself. K>1: each shot is predicted from
    the remaining K-1 (leave-one-out). Returns ``(tuned_model, losses)`` with
    ``losses[s]`` the support loss before update ``s`` (``steps + 1`` values).
    """
    tuned = model.clone()
    if cfg.steps == 0:
        return tuned, []
    pyramids = pyramids or PyramidCache(model)
    pyrs = [pyramids(s) for s in support]
    names = tuned.group_names(cfg.group)
    need_anchor = any(n.startswith("anchor.") for n in names)
    optim = OptimState(lr=cfg.lr)
    losses = []
    for _ in range(cfg.steps):
        loss, g = _tsf_loss(tuned, pyrs, support, True, need_anchor)
        losses.append(loss)
        tuned.params = adam_step(tuned.params, g, optim, names)
    losses.append(_tsf_loss(tuned, pyrs, support, False, False)[0])
    return tuned, losses


def param_digest(params: dict) -> dict[str, str]:
    return {k: hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest() for k, v in params.items()}


# --- evaluation --------------------------------------------------------------------------

def feature_distance(pyramids_a, pyramids_b, W_a=None, W_b=None, transformed: bool = False) -> float:
    """Mean over levels of the Euclidean distance between the two sets' mean feature vectors.

    With ``transformed`` each image's features are first mapped by its own
    per-level transform (``W_a[i][l]``).
    """
    if not pyramids_a or not pyramids_b:
        raise ShapeMismatch("both feature sets must be non-empty")
    levels = len(pyramids_a[0])
    if any(len(p) != levels for p in list(pyramids_a) + list(pyramids_b)):
        raise ShapeMismatch("pyramids disagree on level count")

    def level_mean(pyrs, Ws, l):
        acc = []
        for i, p in enumerate(pyrs):
            F = np.asarray(p[l], dtype=np.float64)
            if transformed:
                F = apply_transform(np.asarray(Ws[i][l], dtype=np.float64), F)
            acc.append(F.reshape(F.shape[0], -1).mean(axis=1))
        return np.mean(acc, axis=0)

    d = []
    for l in range(levels):
        ma, mb = level_mean(pyramids_a, W_a, l), level_mean(pyramids_b, W_b, l)
        if ma.shape != mb.shape:
            raise ShapeMismatch(f"level {l}: {ma.shape} vs {mb.shape}")
        d.append(float(np.linalg.norm(ma - mb)))
    return float(np.mean(d))


def self_transforms(model: DMTNet, samples, pyramids=None):
    """Each image's support transforms computed from its own mask (query = itself)."""
    pyramids = pyramids or PyramidCache(model)
    out = []
    for s in samples:
        p = pyramids(s)
        out.append(smt_forward([p], [s.mask], p, model.anchors, model.spec, model.smt_cfg).Ws)
    return out


def domain_feature_distance(model: DMTNet, a: list[Sample], b: list[Sample]) -> dict:
    ca, cb = PyramidCache(model), PyramidCache(model)
    pa, pb = [ca(s) for s in a], [cb(s) for s in b]
    wa, wb = self_transforms(model, a, ca), self_transforms(model, b, cb)
    return {"pre": feature_distance(pa, pb), "post": feature_distance(pa, pb, wa, wb, transformed=True)}


@dataclass(frozen=True)
class TestSettings:
    __test__ = False

    runs: int = 5
    episodes: int = 100
    spec: EpisodeSpec = EpisodeSpec()
    tsf: TsfConfig = TsfConfig()
    combine: str = "f"
    seed: int = 0
    bypass_smt: bool = False
    ablate_tsf: bool = True
    jobs: int = 1


@dataclass
class EpisodeRecord:
    run: int
    episode: int
    cls: int
    iou: float
    l1: float
    l2: float
    tsf_before: float
    tsf_after: float
    iou_no_tsf: float
    preds: list = field(default_factory=list, repr=False)


REPORT_COLUMNS = ["run", "episode", "class", "iou", "l1", "l2", "tsf_loss_before", "tsf_loss_after"]


@dataclass
class TestReport:
    records: list[EpisodeRecord]
    settings: TestSettings
    feature_distance: dict | None = None

    def per_run(self, key: str = "iou") -> list[float]:
        return [float(np.mean([getattr(r, key) for r in self.records if r.run == run]))
                for run in range(self.settings.runs)]

    def summary(self) -> dict:
        def agg(key):
            vals = self.per_run(key)
            return {"per_run": vals, "mean": float(np.mean(vals)), "std": float(np.std(vals))}
        out = {"runs": self.settings.runs, "episodes_per_run": self.settings.episodes,
               "shots": self.settings.spec.K, "tsf_steps": self.settings.tsf.steps,
               "tsf_group": self.settings.tsf.group, "combine": self.settings.combine,
               "bypass_smt": self.settings.bypass_smt, "miou": agg("iou")}
        if self.settings.ablate_tsf and self.settings.tsf.steps > 0:
            out["miou_no_tsf"] = agg("iou_no_tsf")
        if self.feature_distance is not None:
            out["feature_distance"] = self.feature_distance
        return out

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.records:
            w.writerow([r.run, r.episode, r.cls, f"{r.iou:.8f}", f"{r.l1:.8f}", f"{r.l2:.8f}",
                        f"{r.tsf_before:.8f}", f"{r.tsf_after:.8f}"])
        return buf.getvalue()

    def write(self, out_dir, dump_masks: bool = False) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.csv_text())
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        if dump_masks:
            (out / "masks").mkdir(exist_ok=True)
            for r in self.records:
                for j, m in enumerate(r.preds):
                    write_pgm(out / "masks" / f"run{r.run}_ep{r.episode:04d}_q{j}.pgm", m)
        return out


def _eval_episode(model: DMTNet, ep: Episode, settings: TestSettings, run: int, idx: int, cache) -> EpisodeRecord:
    tuned, losses = tsf_finetune(model, ep.support, settings.tsf, cache)
    res = run_episode(tuned, ep, "eval", settings.combine, cache, settings.bypass_smt)
    no_tsf = res.mean_iou
    if settings.ablate_tsf and settings.tsf.steps > 0:
        no_tsf = run_episode(model, ep, "eval", settings.combine, cache, settings.bypass_smt).mean_iou
    before = losses[0] if losses else float("nan")
    after = losses[-1] if losses else float("nan")
    return EpisodeRecord(run, idx, ep.cls, res.mean_iou, res.l1, res.l2, before, after, no_tsf, res.pred)


def meta_test(model: DMTNet, dataset: Dataset, settings: TestSettings = TestSettings(),
              reference: Dataset | None = None) -> TestReport:
    """Evaluate over ``runs`` seeded runs; each episode gets its own TSF-tuned copy.

    Episodes of run ``r`` are drawn from ``rng([seed, r])``; results do not
    depend on ``jobs``.
    """
    cache = PyramidCache(model)
    records: list[EpisodeRecord] = []
    for run in range(settings.runs):
        rng = np.random.default_rng([settings.seed, run])
        eps = [sample_episode(dataset, settings.spec, rng) for _ in range(settings.episodes)]
        if settings.jobs > 1:
            with ThreadPoolExecutor(settings.jobs) as pool:
                futs = [pool.submit(_eval_episode, model, ep, settings, run, i, cache) for i, ep in enumerate(eps)]
                records.extend(f.result() for f in futs)
        else:
            records.extend(_eval_episode(model, ep, settings, run, i, cache) for i, ep in enumerate(eps))
    fd = None
    if reference is not None:
        n = min(len(reference), len(dataset), 32)
        fd = domain_feature_distance(model, reference.samples[:n], dataset.samples[:n])
    return TestReport(records, settings, fd)


def transform_diagnostics(model: DMTNet, dataset: Dataset, reference: Dataset, episodes: int = 20,
                          seed: int = 0, spec: EpisodeSpec = EpisodeSpec()) -> list[dict]:
    """Per-level feature distances before/after SMT and transform solve residuals."""
    n = min(len(reference), len(dataset), 32)
    a, b = reference.samples[:n], dataset.samples[:n]
    ca, cb = PyramidCache(model), PyramidCache(model)
    pa, pb = [ca(s) for s in a], [cb(s) for s in b]
    wa, wb = self_transforms(model, a, ca), self_transforms(model, b, cb)
    rng = np.random.default_rng(seed)
    res_s = np.zeros(model.spec.levels)
    res_q = np.zeros(model.spec.levels)
    for _ in range(episodes):
        ep = sample_episode(dataset, spec, rng)
        sp = [cb(s) for s in ep.support]
        out = smt_forward(sp, [s.mask for s in ep.support], cb(ep.query[0]), model.anchors, model.spec, model.smt_cfg)
        for l, lv in enumerate(out.levels):
            res_s[l] = max(res_s[l], np.abs(lv.Ws @ lv.Cs - lv.As).max())
            res_q[l] = max(res_q[l], np.abs(lv.Wq @ lv.Cq - lv.Aq).max())
    rows = []
    for l in range(model.spec.levels):
        sel = lambda pyrs: [[p[l]] for p in pyrs]  # noqa: E731
        wsel = lambda ws: [[w[l]] for w in ws]  # noqa: E731
        rows.append({"level": l,
                     "dist_pre": feature_distance(sel(pa), sel(pb)),
                     "dist_post": feature_distance(sel(pa), sel(pb), wsel(wa), wsel(wb), transformed=True),
                     "residual_s": float(res_s[l]), "residual_q": float(res_q[l])})
    return rows


def save_training(model: DMTNet, optim: OptimState, tlog: TrainLog, out, episode: int, extra=None) -> Path:
    root = save_checkpoint(model, out, episode=episode, optim=optim, extra=extra)
    tlog.to_csv(root / "train_log.csv")
    return root
