"""JSON run configuration shared by the CLI commands."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from dmtnet.data import EpisodeSpec, SyntheticDomain, default_domains
from dmtnet.episodes import TsfConfig
from dmtnet.errors import ConfigError, DimensionMismatch
from dmtnet.features import PyramidSpec
from dmtnet.model import PARAM_GROUPS
from dmtnet.objectives import LossWeights
from dmtnet.smt import SmtConfig

SEED_ENV = "DMT_SEED"


def _check_int(name, v, lo):
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigError(f"{name} must be an integer >= {lo}, got {v!r}")


@dataclass
class TrainSettings:
    episodes: int = 500
    lr: float = 1e-3
    group: str = "all"
    log_every: int = 50

    def __post_init__(self):
        _check_int("train.episodes", self.episodes, 0)
        _check_int("train.log_every", self.log_every, 0)
        if isinstance(self.lr, bool) or not isinstance(self.lr, (int, float)) or not self.lr >= 0:
            raise ConfigError(f"train.lr must be a number >= 0, got {self.lr!r}")
        if self.group not in PARAM_GROUPS:
            raise ConfigError(f"train.group must be one of {PARAM_GROUPS}")


@dataclass
class EvalSettings:
    runs: int = 5
    episodes: int = 100
    combine: str = "f"
    jobs: int = 1

    def __post_init__(self):
        _check_int("test.runs", self.runs, 1)
        _check_int("test.episodes", self.episodes, 1)
        _check_int("test.jobs", self.jobs, 1)
        if self.combine not in ("f", "fb"):
            raise ConfigError(f"test.combine must be 'f' or 'fb', got {self.combine!r}")


@dataclass
class Paths:
    data: str = "data/source"
    checkpoint: str = "ckpt"
    report: str = "report"


@dataclass
class RunConfig:
    seed: int = 0
    extractor: str = "filterbank"
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    smt: SmtConfig = field(default_factory=SmtConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    tsf: TsfConfig = field(default_factory=TsfConfig)
    pyramid: PyramidSpec = field(default_factory=PyramidSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    test: EvalSettings = field(default_factory=EvalSettings)
    paths: Paths = field(default_factory=Paths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pyramid"] = self.pyramid.to_dict()
        return d


_SECTIONS = {"episode": EpisodeSpec, "smt": SmtConfig, "loss": LossWeights, "tsf": TsfConfig,
             "pyramid": PyramidSpec, "train": TrainSettings, "test": EvalSettings, "paths": Paths}


def _build(cls, section: str, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be an object")
    if cls is PyramidSpec:
        raw = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**raw)
    except (TypeError, ValueError, DimensionMismatch) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(_SECTIONS) - {"seed", "extractor"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**{k: _build(cls, k, raw[k]) for k, cls in _SECTIONS.items() if k in raw})
    if "seed" in raw:
        if not isinstance(raw["seed"], int):
            raise ConfigError("seed must be an integer")
        cfg.seed = raw["seed"]
    if "extractor" in raw:
        if raw["extractor"] not in ("filterbank", "fixture"):
            raise ConfigError(f"unknown extractor {raw['extractor']!r}")
        cfg.extractor = raw["extractor"]
    return apply_seed_env(cfg)


def apply_seed_env(cfg: RunConfig) -> RunConfig:
    val = os.environ.get(SEED_ENV)
    if val is not None and val.strip():
        try:
            cfg.seed = int(val)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {val!r}") from None
    return cfg


def load_config(path) -> RunConfig:
    """Read a config file; missing sections fall back to defaults."""
    if path is None:
        return apply_seed_env(RunConfig())
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


@dataclass
class DataSpec:
    domains: list[SyntheticDomain] = field(default_factory=default_domains)
    n_images: int = 200
    image_size: int = 64
    source: str = "source"

    def __post_init__(self):
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ConfigError("domain names must be unique")
        if self.source not in names:
            raise ConfigError(f"source domain {self.source!r} not among {names}")
        fam = next(d.family for d in self.domains if d.name == self.source)
        clash = [d.name for d in self.domains if d.name != self.source and d.family == fam]
        if clash:
            raise ConfigError(f"target domains {clash} share the source class family {fam!r}")
        if self.n_images < 1 or self.image_size < 16:
            raise ConfigError("need n_images >= 1 and image_size >= 16")


def load_data_spec(path) -> DataSpec:
    if path is None:
        return DataSpec()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("data spec root must be a JSON object")
    kw = {k: raw[k] for k in ("n_images", "image_size", "source") if k in raw}
    if "domains" in raw:
        kw["domains"] = [SyntheticDomain.from_dict(d) for d in raw["domains"]]
    unknown = set(raw) - {"domains", "n_images", "image_size", "source"}
    if unknown:
        raise ConfigError(f"unknown data spec keys: {sorted(unknown)}")
    return DataSpec(**kw)
