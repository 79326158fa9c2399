"""Deterministic multi-level feature extractors standing in for a pretrained backbone."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dmtnet.errors import DimensionMismatch, ShapeMismatch
from dmtnet.tensor import DTYPE, read_tensor, write_tensor

GROUPS = ("low", "mid", "high")


@dataclass(frozen=True)
class PyramidSpec:
    channels: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (4, 8, 16)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.channels) != len(self.strides) or not self.channels:
            raise DimensionMismatch("channels and strides must have the same non-zero length")
        if any(c < 2 for c in self.channels):
            raise DimensionMismatch("every level needs at least 2 channels")
        if list(self.strides) != sorted(self.strides):
            raise DimensionMismatch("strides must be non-decreasing")

    @property
    def levels(self) -> int:
        return len(self.channels)

    def spatial(self, h: int, w: int) -> list[tuple[int, int]]:
        return [(h // s, w // s) for s in self.strides]

    def group(self, level: int) -> str:
        """Anchor group of a level: identity for three levels, by thirds otherwise."""
        n = self.levels
        if n == 3:
            return GROUPS[level]
        return GROUPS[min(2, level * 3 // n)]

    def group_levels(self, group: str) -> list[int]:
        return [l for l in range(self.levels) if self.group(l) == group]

    def check_image(self, h: int, w: int) -> None:
        s = self.strides[-1]
        if h % s or w % s:
            raise DimensionMismatch(f"image {h}x{w} not divisible by stride {s}")

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "strides": list(self.strides),
                "in_channels": self.in_channels}


def _conv3x3(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 cross-correlation. x: Cin x H x W, k: Cout x Cin x 3 x 3."""
    cin, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((cin, 3, 3, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, i:i + h, j:j + w]
    return np.tensordot(k, cols, axes=([1, 2, 3], [0, 1, 2]))


def _avg_pool(x: np.ndarray, f: int) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))


@dataclass
class FeatureExtractor:
    """Shared extractor applied identically to support and query images.

    ``filterbank``: seeded 3x3 convolutions without bias; each level's features
    are the average-pooled convolution responses, and the next level consumes
    their ReLU. ``fixture``: seeded random channel projection of the
    average-pooled image plus a seeded per-level texture field.
    """

    spec: PyramidSpec = field(default_factory=PyramidSpec)
    seed: int = 0
    mode: str = "filterbank"

    def __post_init__(self):
        if self.mode not in ("filterbank", "fixture"):
            raise ValueError(f"unknown extractor mode {self.mode!r}")
        rng = np.random.default_rng(self.seed)
        self.kernels = []
        cin = self.spec.in_channels
        for c in self.spec.channels:
            if self.mode == "filterbank":
                k = rng.standard_normal((c, cin, 3, 3)) / np.sqrt(9 * cin)
                cin = c
            else:
                k = rng.standard_normal((c, self.spec.in_channels))
            self.kernels.append(k.astype(DTYPE))
        self._fixture_seed = int(rng.integers(2**31))

    def __call__(self, img: np.ndarray) -> list[np.ndarray]:
        return extract_pyramid(img, self)


def extract_pyramid(img: np.ndarray, extractor: FeatureExtractor) -> list[np.ndarray]:
    """Feature pyramid of a ``C x H x W`` image in [0, 1]."""
    spec = extractor.spec
    img = np.clip(np.asarray(img, dtype=DTYPE), 0.0, 1.0)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] != spec.in_channels:
        raise DimensionMismatch(f"image has {img.shape[0]} channels, spec expects {spec.in_channels}")
    _, h, w = img.shape
    spec.check_image(h, w)
    out = []
    if extractor.mode == "filterbank":
        x, prev = img, 1
        for k, s in zip(extractor.kernels, spec.strides):
            resp = _conv3x3(x, k)
            feat = _avg_pool(resp, s // prev)
            out.append(np.ascontiguousarray(feat, dtype=DTYPE))
            x, prev = np.maximum(feat, 0.0), s
    else:
        rng = np.random.default_rng(extractor._fixture_seed)
        for k, s in zip(extractor.kernels, spec.strides):
            pooled = _avg_pool(img, s)
            feat = np.tensordot(k, pooled, axes=(1, 0))
            feat = feat + 0.1 * rng.standard_normal(feat.shape)
            out.append(np.ascontiguousarray(feat, dtype=DTYPE))
    return out


def check_pyramid(pyr, spec: PyramidSpec, hw: tuple[int, int] | None = None) -> None:
    if len(pyr) != spec.levels:
        raise ShapeMismatch(f"expected {spec.levels} levels, got {len(pyr)}")
    for l, f in enumerate(pyr):
        if f.ndim != 3 or f.shape[0] != spec.channels[l]:
            raise ShapeMismatch(f"level {l}: shape {f.shape} vs {spec.channels[l]} channels")
        if hw is not None and f.shape[1:] != spec.spatial(*hw)[l]:
            raise ShapeMismatch(f"level {l}: spatial {f.shape[1:]} vs {spec.spatial(*hw)[l]}")


def save_fixture_pyramid(stem, pyr) -> list[Path]:
    paths = []
    for l, f in enumerate(pyr):
        p = Path(f"{os.fspath(stem)}.l{l}.dmt")
        write_tensor(p, f)
        paths.append(p)
    return paths


def load_fixture_pyramid(stem, spec: PyramidSpec) -> list[np.ndarray]:
    pyr = []
    for l in range(spec.levels):
        p = Path(f"{os.fspath(stem)}.l{l}.dmt")
        if not p.exists():
            raise ShapeMismatch(f"missing level file {p}")
        pyr.append(read_tensor(p))
    check_pyramid(pyr, spec)
    h, w = pyr[0].shape[1:]
    s0 = spec.strides[0]
    check_pyramid(pyr, spec, (h * s0, w * s0))
    return pyr
