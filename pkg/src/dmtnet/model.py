"""The assembled network: extractor -> SMT -> DHC -> fusion heads, plus checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dmtnet.dhc import DhcOutput, dhc_backward, dhc_forward
from dmtnet.errors import ConfigError, ShapeMismatch
from dmtnet.features import FeatureExtractor, PyramidSpec
from dmtnet.fusion import FusionCache, fusion_backward, fusion_forward, init_fusion
from dmtnet.objectives import LossWeights, OptimState
from dmtnet.smt import SmtConfig, SmtOutput, identity_transforms, init_anchors, smt_backward, smt_forward
from dmtnet.tensor import read_tensor, write_tensor

PARAM_GROUPS = ("encoder", "decoder", "low", "mid", "high", "anchors", "all")
CHECKPOINT_VERSION = 1


def group_of(name: str) -> str:
    if name.startswith("anchor."):
        return name.split(".")[2]
    if name.startswith(("sep.", "conv1.", "conv2.")):
        return "encoder"
    if name.startswith(("conv3.", "conv4.")):
        return "decoder"
    raise KeyError(name)


@dataclass
class ForwardState:
    smt: SmtOutput
    dhc: list[DhcOutput]
    fusion: list[FusionCache]
    M_f: np.ndarray | None
    M_b: np.ndarray | None
    bypass_smt: bool


@dataclass
class DMTNet:
    spec: PyramidSpec = field(default_factory=PyramidSpec)
    smt_cfg: SmtConfig = field(default_factory=SmtConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    extractor_mode: str = "filterbank"
    params: dict = field(default_factory=dict)
    # float64 makes the whole chain differentiable to finite-difference accuracy
    compute_dtype: type = np.float32

    def __post_init__(self):
        self.extractor = FeatureExtractor(self.spec, seed=self.seed, mode=self.extractor_mode)
        if not self.params:
            self.params = {**init_anchors(self.spec, seed=self.seed + 1),
                           **init_fusion(self.spec.levels, seed=self.seed + 2)}

    def clone(self) -> "DMTNet":
        """Shallow copy: parameter arrays are shared until replaced by an update."""
        return replace(self, params=dict(self.params))

    @property
    def anchors(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("anchor.")}

    @property
    def fusion_params(self) -> dict:
        return {k: v for k, v in self.params.items() if not k.startswith("anchor.")}

    def group_names(self, group: str) -> list[str]:
        if group not in PARAM_GROUPS:
            raise ConfigError(f"unknown parameter group {group!r}; choose from {PARAM_GROUPS}")
        if group == "all":
            return sorted(self.params)
        if group == "anchors":
            return sorted(k for k in self.params if k.startswith("anchor."))
        return sorted(k for k in self.params if group_of(k) == group)

    def pyramid(self, img: np.ndarray) -> list[np.ndarray]:
        return self.extractor(img)

    def forward(self, support_pyrs, support_masks, query_pyr, out_hw, heads=("f", "b"),
                bypass_smt: bool = False) -> ForwardState:
        """Predict query masks; with K shots the per-shot head outputs are averaged."""
        smt = smt_forward(support_pyrs, support_masks, query_pyr, self.anchors, self.spec, self.smt_cfg)
        if bypass_smt:
            Ws = Wq = identity_transforms(self.spec)
        else:
            Ws, Wq = smt.Ws, smt.Wq
        dhcs, caches, mf, mb = [], [], [], []
        fparams = self.fusion_params
        for pyr, mask in zip(support_pyrs, support_masks):
            d = dhc_forward(pyr, mask, query_pyr, Ws, Wq, dtype=self.compute_dtype)
            out, cache = fusion_forward(d.corr_f, d.corr_b, fparams, out_hw, heads=heads)
            dhcs.append(d)
            caches.append(cache)
            mf.append(out.M_f)
            mb.append(out.M_b)
        M_f = np.mean(mf, axis=0) if "f" in heads else None
        M_b = np.mean(mb, axis=0) if "b" in heads else None
        return ForwardState(smt, dhcs, caches, M_f, M_b, bypass_smt)

    def backward(self, state: ForwardState, dM_f, dM_b, anchors: bool = True) -> dict:
        """Gradients of a loss w.r.t. every parameter given d loss / d (M_f, M_b)."""
        k = len(state.fusion)
        grads: dict[str, np.ndarray] = {}
        dWs = [np.zeros((c, c)) for c in self.spec.channels]
        dWq = [np.zeros((c, c)) for c in self.spec.channels]
        scale = lambda g: None if g is None else np.asarray(g) / k  # noqa: E731
        for d, cache in zip(state.dhc, state.fusion):
            g, dcf, dcb = fusion_backward(cache, scale(dM_f), scale(dM_b))
            for name, v in g.items():
                grads[name] = grads[name] + v if name in grads else v
            if anchors and not state.bypass_smt:
                zeros = [np.zeros(c.shape) for c in d.corr_f]
                s, q = dhc_backward(d, dcf if dcf is not None else zeros, dcb if dcb is not None else zeros)
                for l in range(len(s)):
                    dWs[l] += s[l]
                    dWq[l] += q[l]
        if anchors and not state.bypass_smt:
            grads.update(smt_backward(state.smt, dWs, dWq, self.anchors))
        for name, v in self.params.items():
            g = grads.get(name)
            grads[name] = np.zeros(v.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(v.shape)
        return grads

    def config_dict(self) -> dict:
        return {"pyramid": self.spec.to_dict(),
                "smt": {"gamma": self.smt_cfg.gamma, "beta": self.smt_cfg.beta, "ridge": self.smt_cfg.ridge},
                "loss": {"alpha1": self.weights.alpha1, "alpha2": self.weights.alpha2},
                "extractor": self.extractor_mode}


def binarize(M_f, M_b=None, combine: str = "f") -> np.ndarray:
    """Final binary prediction: ``M_f >= 0.5`` or, for ``fb``, ``(M_f + 1 - M_b) / 2 >= 0.5``."""
    if combine == "f":
        score = M_f
    elif combine == "fb":
        if M_b is None:
            raise ShapeMismatch("combine='fb' needs the background head")
        score = 0.5 * (M_f + 1.0 - M_b)
    else:
        raise ConfigError(f"unknown combine mode {combine!r}")
    return (np.asarray(score) >= 0.5).astype(np.float32)


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(model: DMTNet, path, episode: int = 0, optim: OptimState | None = None,
                    extra: dict | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, v in sorted(model.params.items()):
        fname = f"{name}.dmt"
        write_tensor(root / fname, v)
        tensors[name] = {"file": fname, "shape": list(v.shape)}
    manifest = {"version": CHECKPOINT_VERSION, "seed": model.seed, "config": model.config_dict(),
                "episode": int(episode), "tensors": tensors}
    if optim is not None:
        moments = {}
        for name in sorted(optim.m):
            for kind, store in (("m", optim.m), ("v", optim.v)):
                fname = f"optim.{kind}.{name}.dmt"
                write_tensor(root / fname, np.asarray(store[name], dtype=np.float32).reshape(model.params[name].shape))
                moments.setdefault(name, {})[kind] = fname
        manifest["optimizer"] = {"lr": optim.lr, "beta1": optim.beta1, "beta2": optim.beta2,
                                 "eps": optim.eps, "t": optim.t, "moments": moments}
    if extra:
        manifest["extra"] = extra
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_checkpoint(path):
    """Returns ``(model, manifest, optim_state_or_None)``."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = manifest["config"]
    model = DMTNet(
        spec=PyramidSpec(**cfg["pyramid"]),
        smt_cfg=SmtConfig(**cfg["smt"]),
        weights=LossWeights(**cfg["loss"]),
        seed=int(manifest["seed"]),
        extractor_mode=cfg.get("extractor", "filterbank"),
    )
    params = {}
    for name, info in manifest["tensors"].items():
        t = read_tensor(root / info["file"])
        if list(t.shape) != info["shape"]:
            raise ShapeMismatch(f"{name}: file shape {t.shape} vs manifest {info['shape']}")
        params[name] = t
    if set(params) != set(model.params):
        raise ShapeMismatch("checkpoint tensors do not match the model layout")
    for name, v in params.items():
        if v.shape != model.params[name].shape:
            raise ShapeMismatch(f"{name}: {v.shape} vs expected {model.params[name].shape}")
    model.params = params
    optim = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        optim = OptimState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], t=o["t"])
        for name, files in o["moments"].items():
            optim.m[name] = read_tensor(root / files["m"]).astype(np.float64)
            optim.v[name] = read_tensor(root / files["v"]).astype(np.float64)
    return model, manifest, optim
