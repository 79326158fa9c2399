"""Synthetic cross-domain segmentation data, episodic sampling and raster I/O."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from dmtnet.errors import ConfigError, InsufficientData
from dmtnet.tensor import bilinear_resize

FAMILIES = ("ellipse", "polygon", "ring")
# masks must keep fg and bg mass after resizing to each of these strides
VISIBLE_STRIDES = (4, 8, 16)


@dataclass(frozen=True)
class SyntheticDomain:
    name: str
    family: str = "ellipse"
    n_classes: int = 4
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    texture_amp: float = 0.04
    texture_freq: float = 3.0
    area_range: tuple[float, float] = (0.05, 0.40)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown shape family {self.family!r}")
        if len(self.gain) != 3 or len(self.bias) != 3:
            raise ConfigError("gain and bias need one value per channel")
        if any(g <= 0 for g in self.gain):
            raise ConfigError("style gains must be positive")
        lo, hi = self.area_range
        if not 0 < lo < hi < 1:
            raise ConfigError("area_range must satisfy 0 < lo < hi < 1")
        if self.n_classes < 1:
            raise ConfigError("need at least one class")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDomain":
        d = dict(d)
        for k in ("gain", "bias", "area_range"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


def default_domains() -> list[SyntheticDomain]:
    """A source domain and two style-shifted target domains with disjoint shape families."""
    return [
        SyntheticDomain("source", "ellipse"),
        SyntheticDomain("target_polygon", "polygon", gain=(0.55, 1.25, 0.8), bias=(0.15, -0.1, 0.1),
                        texture_amp=0.08, texture_freq=5.0),
        SyntheticDomain("target_ring", "ring", gain=(1.3, 0.7, 1.15), bias=(-0.1, 0.12, -0.05),
                        texture_amp=0.06, texture_freq=2.0),
    ]


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    mask: np.ndarray  # H x W binary
    cls: int


@dataclass
class Dataset:
    domain: SyntheticDomain
    samples: list[Sample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def by_class(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            out.setdefault(s.cls, []).append(i)
        return out


def class_colors(family: str, cls: int):
    """Characteristic fg and bg colours of a class; fixed by (family, class)."""
    rng = np.random.default_rng(zlib.crc32(f"{family}:{cls}".encode()))
    while True:
        fg = rng.uniform(0.15, 0.85, 3)
        bg = rng.uniform(0.15, 0.85, 3)
        cos = fg @ bg / (np.linalg.norm(fg) * np.linalg.norm(bg))
        if cos < 0.9 and np.abs(fg - bg).max() > 0.3:
            return fg, bg


def _shape_mask(family: str, rng: np.random.Generator, size: int, area_range) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    lo, hi = area_range
    for _ in range(1000):
        cy, cx = rng.uniform(0.3, 0.7, 2) * size
        r = rng.uniform(0.12, 0.36) * size
        if family == "ellipse":
            ratio = rng.uniform(0.5, 1.0)
            th = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
            v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
            m = (u / r) ** 2 + (v / (r * ratio)) ** 2 <= 1.0
        elif family == "polygon":
            n = int(rng.integers(3, 7))
            ang = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(0, 2 * np.pi) \
                + rng.uniform(-0.3, 0.3, n) * (np.pi / n)
            px = cx + r * np.cos(ang)
            py = cy + r * np.sin(ang)
            m = np.ones((size, size), dtype=bool)
            for i in range(n):
                x0, y0, x1, y1 = px[i], py[i], px[(i + 1) % n], py[(i + 1) % n]
                m &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
        else:
            inner = r * rng.uniform(0.35, 0.6)
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            m = (d2 <= r * r) & (d2 >= inner * inner)
        frac = m.mean()
        if lo <= frac <= hi and _visible(m.astype(np.float32)):
            return m.astype(np.float32)
    raise RuntimeError("could not draw a mask within the configured area range")


def _visible(mask: np.ndarray) -> bool:
    size = mask.shape[0]
    for stride in VISIBLE_STRIDES:
        n = max(size // stride, 1)
        small = bilinear_resize(mask, n, n)
        if small.sum() < 1e-3 or (1.0 - small).sum() < 1e-3:
            return False
    return True


def _canonical(family: str, cls: int, rng: np.random.Generator, size: int, area_range):
    mask = _shape_mask(family, rng, size, area_range)
    fg, bg = class_colors(family, cls)
    fg = fg + rng.uniform(-0.06, 0.06, 3)
    bg = bg + rng.uniform(-0.06, 0.06, 3)
    img = np.where(mask[None] > 0, fg[:, None, None], bg[:, None, None])
    img = img + 0.03 * rng.standard_normal(img.shape)
    phase = rng.uniform(0, 2 * np.pi)
    angle = rng.uniform(0, np.pi)
    return img, mask, phase, angle


def _style(img: np.ndarray, domain: SyntheticDomain, phase: float, angle: float) -> np.ndarray:
    size = img.shape[-1]
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex = domain.texture_amp * np.sin(2 * np.pi * domain.texture_freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    out = np.asarray(domain.gain)[:, None, None] * img + np.asarray(domain.bias)[:, None, None] + tex[None]
    # quantize so that PPM round-trips are exact
    return (np.round(np.clip(out, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def gen_domain(domain: SyntheticDomain, n_images: int, seed: int, image_size: int = 64) -> Dataset:
    """Deterministic dataset; shapes and layout depend on (family, seed) only, style on the domain."""
    rng = np.random.default_rng([seed, FAMILIES.index(domain.family)])
    ds = Dataset(domain)
    for i in range(n_images):
        cls = i % domain.n_classes
        img, mask, phase, angle = _canonical(domain.family, cls, rng, image_size, domain.area_range)
        ds.samples.append(Sample(_style(img, domain, phase, angle), mask, cls))
    return ds


@dataclass(frozen=True)
class EpisodeSpec:
    K: int = 1
    Q: int = 1
    N: int = 1
    image_size: int = 64

    def __post_init__(self):
        if self.N != 1:
            raise ConfigError("only 1-way episodes are supported")
        if self.K < 1 or self.Q < 1:
            raise ConfigError("K and Q must be >= 1")


@dataclass
class Episode:
    cls: int
    support: list[Sample]
    query: list[Sample]
    support_idx: list[int]
    query_idx: list[int]


def sample_episode(dataset: Dataset, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    need = spec.K + spec.Q
    pools = {c: idx for c, idx in sorted(dataset.by_class().items()) if len(idx) >= need}
    if not pools:
        raise InsufficientData(f"no class has {need} images (K={spec.K}, Q={spec.Q})")
    classes = sorted(pools)
    cls = classes[int(rng.integers(len(classes)))]
    pick = rng.choice(pools[cls], size=need, replace=False)
    s_idx = [int(i) for i in pick[:spec.K]]
    q_idx = [int(i) for i in pick[spec.K:]]
    return Episode(cls, [dataset.samples[i] for i in s_idx], [dataset.samples[i] for i in q_idx], s_idx, q_idx)


# --- raster I/O ---------------------------------------------------------------

def write_pgm(path, mask: np.ndarray) -> None:
    """Binary mask as 8-bit PGM (0 background, 255 foreground)."""
    Image.fromarray(np.where(np.asarray(mask) >= 0.5, 255, 0).astype(np.uint8), mode="L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(np.float32)


def write_ppm(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(img), 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PPM")


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("RGB")).astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def save_dataset(ds: Dataset, out_dir, seed: int) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    items = []
    for i, s in enumerate(ds.samples):
        img_rel, mask_rel = f"images/{i:05d}.ppm", f"masks/{i:05d}.pgm"
        write_ppm(out / img_rel, s.image)
        write_pgm(out / mask_rel, s.mask)
        items.append({"image": img_rel, "mask": mask_rel, "class": s.cls})
    manifest = {"domain": ds.domain.to_dict(), "seed": seed,
                "image_size": int(ds.samples[0].mask.shape[0]) if ds.samples else 0, "items": items}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{root / 'manifest.json'}: {exc}") from None
    ds = Dataset(SyntheticDomain.from_dict(manifest["domain"]))
    for it in manifest["items"]:
        ds.samples.append(Sample(read_ppm(root / it["image"]), read_pgm(root / it["mask"]), int(it["class"])))
    return ds
