"""Procedural HR corpus and two disjoint LR degradation families.

Family ``A_synthetic`` plays the role of the synthetic training pipeline;
family ``B_reallike`` is a different corruption chain standing in for
real-world captures. Images are float arrays shaped (C, H, W) in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .diffmath import dct_matrix

FAMILIES = ("A_synthetic", "B_reallike")


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, keys)]))


# --------------------------------------------------------------------------
# corpus
# --------------------------------------------------------------------------


def _grating(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size))
    for _ in range(rng.integers(1, 4)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.0, size / 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img /= max(np.abs(img).max(), 1e-9)
    return 0.5 + 0.35 * img


def _inside_polygon(px, py, vx, vy):
    # even-odd ray casting, vectorized over pixels
    inside = np.zeros(px.shape, dtype=bool)
    j = len(vx) - 1
    for i in range(len(vx)):
        cond = (vy[i] > py) != (vy[j] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = (vx[j] - vx[i]) * (py - vy[i]) / (vy[j] - vy[i]) + vx[i]
        inside ^= cond & (px < xcross)
        j = i
    return inside


def _polygons(rng, size):
    ss = 2  # supersampling factor for antialiased edges
    n = size * ss
    py, px = (np.mgrid[0:n, 0:n] + 0.5) / n
    img = np.full((n, n), rng.uniform(0.2, 0.8))
    for _ in range(rng.integers(2, 6)):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        nv = rng.integers(3, 7)
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=nv))
        rad = rng.uniform(0.1, 0.4, size=nv)
        mask = _inside_polygon(px, py, cx + rad * np.cos(ang), cy + rad * np.sin(ang))
        img[mask] = rng.uniform(0.0, 1.0)
    return img.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _noise_texture(rng, size):
    sigma = rng.uniform(0.6, 3.0)
    tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    tex /= max(tex.std(), 1e-9)
    return np.clip(0.5 + 0.18 * tex, 0.0, 1.0)


_GENERATORS = (_grating, _polygons, _noise_texture)


def gen_image(seed: int, index: int, size: int) -> np.ndarray:
    rng = derive_rng(seed, index)
    kind = rng.integers(len(_GENERATORS))
    img = _GENERATORS[kind](rng, size)
    # a faint second component keeps every image textured
    other = _GENERATORS[(kind + 1 + rng.integers(2)) % 3](rng, size)
    img = 0.8 * img + 0.2 * other
    return np.clip(img, 0.0, 1.0)[None].astype(np.float32)


def gen_corpus(n: int, size: int, seed: int, scale: int = 4, offset: int = 0) -> list[np.ndarray]:
    """``n`` seeded HR images of shape (1, size, size); ``offset`` shifts the index stream."""
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    if size < 8 or size % 8 or size % scale:
        raise ValueError(f"image size {size} must be a multiple of 8 and of scale {scale}")
    return [gen_image(seed, offset + i, size) for i in range(n)]


# --------------------------------------------------------------------------
# degradations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DegradationConfig:
    family: str = "A_synthetic"
    blur_sigma_range: tuple[float, float] = (0.6, 1.6)
    noise_std_range: tuple[float, float] = (0.0, 0.03)
    scale: int = 4
    compression_strength: float = 0.0
    seed: int = 0
    max_axis_ratio: float = 3.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown degradation family {self.family!r}")
        for name in ("blur_sigma_range", "noise_std_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if not 0.0 <= self.compression_strength <= 1.0:
            raise ValueError("compression_strength must lie in [0, 1]")


def family_a(seed: int = 0, **kw) -> DegradationConfig:
    return DegradationConfig(family="A_synthetic", seed=seed, **kw)


def family_b(seed: int = 0, **kw) -> DegradationConfig:
    kw.setdefault("blur_sigma_range", (0.3, 1.2))
    kw.setdefault("noise_std_range", (0.01, 0.04))
    kw.setdefault("compression_strength", 0.5)
    return DegradationConfig(family="B_reallike", seed=seed, **kw)


def gaussian_kernel(sigma_x: float, sigma_y: float | None = None, theta: float = 0.0) -> np.ndarray:
    """Normalized (possibly rotated anisotropic) Gaussian kernel."""
    sigma_y = sigma_x if sigma_y is None else sigma_y
    radius = max(1, int(math.ceil(3 * max(sigma_x, sigma_y))))
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1].astype(np.float64)
    c, s = math.cos(theta), math.sin(theta)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    k = np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
    return k / k.sum()


def blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.convolve(ch, kernel, mode="reflect") for ch in img])


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.asarray(img, dtype=np.float64).copy()
    return blur(np.asarray(img, dtype=np.float64), gaussian_kernel(sigma))


def area_down(img: np.ndarray, factor: int) -> np.ndarray:
    c, h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by scale {factor}")
    return img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def block_dct_compress(img: np.ndarray, strength: float, block: int = 8) -> np.ndarray:
    """Zero the DCT coefficients with normalized index sum above 1 - strength, per block."""
    if strength <= 0:
        return img
    out = img.copy()
    _, h, w = img.shape
    for y0 in range(0, h, block):
        for x0 in range(0, w, block):
            bh, bw = min(block, h - y0), min(block, w - x0)
            dh, dw = dct_matrix(bh), dct_matrix(bw)
            i, j = np.mgrid[0:bh, 0:bw]
            u = (i + j) / max(bh + bw - 2, 1)
            keep = u <= 1.0 - strength
            keep[0, 0] = True
            for ch in range(img.shape[0]):
                coef = dh @ img[ch, y0 : y0 + bh, x0 : x0 + bw] @ dw.T
                out[ch, y0 : y0 + bh, x0 : x0 + bw] = dh.T @ (coef * keep) @ dw
    return out


def degrade(hr: np.ndarray, cfg: DegradationConfig, index: int = 0) -> np.ndarray:
    """HR (C, H, W) -> LR (C, H/scale, W/scale), deterministic in (hr, cfg, index)."""
    hr = np.asarray(hr, dtype=np.float64)
    if hr.ndim != 3:
        raise ValueError("expected a (C, H, W) image")
    if hr.shape[1] % cfg.scale or hr.shape[2] % cfg.scale:
        raise ValueError(f"HR dims {hr.shape[1:]} not divisible by scale {cfg.scale}")
    rng = derive_rng(cfg.seed, index)
    s_lo, s_hi = cfg.blur_sigma_range
    n_lo, n_hi = cfg.noise_std_range
    sigma = rng.uniform(s_lo, s_hi)
    if cfg.family == "A_synthetic":
        img = gaussian_blur(hr, sigma)
        img = area_down(img, cfg.scale)
        img = img + rng.uniform(n_lo, n_hi) * rng.standard_normal(img.shape)
        img = np.round(np.clip(img, 0.0, 1.0) * 63.0) / 63.0
    else:
        if sigma > 0:
            ratio = rng.uniform(1.0, cfg.max_axis_ratio)
            theta = rng.uniform(0.0, np.pi)
            img = blur(hr, gaussian_kernel(sigma, sigma / ratio, theta))
        else:
            img = hr.copy()
        img = area_down(img, cfg.scale)
        k = rng.uniform(n_lo, n_hi)
        img = img + k * np.sqrt(np.clip(img, 0.0, None)) * rng.standard_normal(img.shape)
        img = block_dct_compress(img, cfg.compression_strength)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------


@dataclass
class PairedBatch:
    hr: np.ndarray  # (k, C, H, W)
    lr: np.ndarray  # (k, C, h, w)
    family: str
    indices: np.ndarray


@dataclass
class UnpairedBatch:
    """LR-only batch; the trainer never sees an HR field."""

    lr: np.ndarray
    family: str
    indices: np.ndarray


@dataclass
class PairedSource:
    """Fixed paired dataset with read instrumentation."""

    hr: np.ndarray
    lr: np.ndarray
    family: str
    reads: int = field(default=0)

    def __len__(self):
        return len(self.hr)

    def batch(self, k: int, rng: np.random.Generator) -> PairedBatch:
        idx = np.sort(rng.choice(len(self.hr), size=k, replace=False))
        self.reads += k
        return PairedBatch(self.hr[idx], self.lr[idx], self.family, idx)


@dataclass
class UnpairedSource:
    lr: np.ndarray
    family: str
    reads: int = field(default=0)

    def __len__(self):
        return len(self.lr)

    def batch(self, k: int, rng: np.random.Generator) -> UnpairedBatch:
        idx = np.sort(rng.choice(len(self.lr), size=k, replace=False))
        self.reads += k
        return UnpairedBatch(self.lr[idx], self.family, idx)


def degrade_corpus(corpus: list[np.ndarray], cfg: DegradationConfig, offset: int = 0) -> np.ndarray:
    return np.stack([degrade(img, cfg, offset + i) for i, img in enumerate(corpus)])


def paired_source(corpus: list[np.ndarray], cfg: DegradationConfig) -> PairedSource:
    if not corpus:
        raise ValueError("empty corpus")
    return PairedSource(np.stack(corpus), degrade_corpus(corpus, cfg), cfg.family)


def unpaired_source(corpus: list[np.ndarray], cfg: DegradationConfig) -> UnpairedSource:
    if not corpus:
        raise ValueError("empty corpus")
    return UnpairedSource(degrade_corpus(corpus, cfg), cfg.family)


def make_paired_batch(corpus, cfg_a: DegradationConfig, k: int, seed: int) -> PairedBatch:
    if not corpus:
        raise ValueError("empty corpus")
    if k > len(corpus):
        raise ValueError(f"batch size {k} exceeds corpus size {len(corpus)}")
    return paired_source(corpus, cfg_a).batch(k, derive_rng(seed, 1))


def make_unpaired_batch(corpus_b, cfg_b: DegradationConfig, k: int, seed: int) -> UnpairedBatch:
    if not corpus_b:
        raise ValueError("empty corpus")
    if k > len(corpus_b):
        raise ValueError(f"batch size {k} exceeds corpus size {len(corpus_b)}")
    return unpaired_source(corpus_b, cfg_b).batch(k, derive_rng(seed, 2))


def split_corpus(corpus: list[np.ndarray], n_a: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Disjoint A/B corpora from one generated list."""
    if not 0 < n_a < len(corpus):
        raise ValueError("split index must leave both parts nonempty")
    return corpus[:n_a], corpus[n_a:]
