"""Distribution-shift diagnostics over image corpora.

LBP texture histograms, DCT band-restricted cosine similarity between
upsampled LR and HR images, Gaussian KDE curves and a PCA embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .degrade import derive_rng
from .formats import write_csv

BANDS = ("low", "mid", "high")
BAND_EDGES = (1.0 / 6.0, 0.5)
KDE_GRID = 256
KDE_FALLBACK_BW = 0.01
PCA_ITERS = 50
PCA_TOL = 1e-8

# (row, col) offsets clockwise from the top-left neighbour; bit i <-> offset i
LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


_EMPTY_BAND = 1e-10


def _plane(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ValueError(f"expected a single-channel image, got {a.shape}")
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D image, got {a.shape}")
    return a


# --------------------------------------------------------------------------
# LBP
# --------------------------------------------------------------------------


def lbp_code(patch) -> int:
    p = np.asarray(patch, dtype=np.float64)
    if p.size != 9:
        raise ValueError(f"LBP patch needs exactly 9 values, got {p.size}")
    p = p.reshape(3, 3)
    c = p[1, 1]
    code = 0
    for bit, (di, dj) in enumerate(LBP_OFFSETS):
        if p[1 + di, 1 + dj] >= c:
            code |= 1 << bit
    return code


def lbp_codes(img) -> np.ndarray:
    """Codes of all interior pixels, shape (H-2, W-2)."""
    a = _plane(img)
    h, w = a.shape
    if h < 3 or w < 3:
        raise ValueError(f"image {a.shape} too small for LBP")
    c = a[1:-1, 1:-1]
    codes = np.zeros(c.shape, dtype=np.int64)
    for bit, (di, dj) in enumerate(LBP_OFFSETS):
        nb = a[1 + di : h - 1 + di, 1 + dj : w - 1 + dj]
        codes |= (nb >= c).astype(np.int64) << bit
    return codes


def lbp_histogram(img) -> np.ndarray:
    codes = lbp_codes(img)
    hist = np.bincount(codes.ravel(), minlength=256).astype(np.float64)
    return hist / hist.sum()


def lbp_separation(corpus_a, corpus_b, n_boot: int = 50, seed: int = 0) -> tuple[float, float]:
    """(inter-family L1, mean within-family bootstrap L1) of mean LBP histograms.

    The within-family figure splits each corpus into two random halves and
    averages the L1 gap between the halves' mean histograms.
    """
    ha = np.stack([lbp_histogram(x) for x in corpus_a])
    hb = np.stack([lbp_histogram(x) for x in corpus_b])
    if len(ha) < 2 or len(hb) < 2:
        raise ValueError("each corpus needs at least 2 images")
    inter = float(np.abs(ha.mean(0) - hb.mean(0)).sum())
    rng = derive_rng(seed, 0xB0)
    within = []
    for _ in range(n_boot):
        for h in (ha, hb):
            perm = rng.permutation(len(h))
            half = len(h) // 2
            within.append(np.abs(h[perm[:half]].mean(0) - h[perm[half:]].mean(0)).sum())
    return inter, float(np.mean(within))


# --------------------------------------------------------------------------
# DCT bands
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BandMask:
    band: str

    def __post_init__(self):
        if self.band not in BANDS:
            raise ValueError(f"band must be one of {BANDS}")

    def mask(self, h: int, w: int) -> np.ndarray:
        i, j = np.mgrid[0:h, 0:w]
        u = (i + j) / max(h + w - 2, 1)
        lo, hi = BAND_EDGES
        if self.band == "low":
            return u < lo
        if self.band == "mid":
            return (u >= lo) & (u < hi)
        return u >= hi


def dct_plane(img) -> np.ndarray:
    a = _plane(img)
    with dm.no_grad():
        return dm.dct2(dm.Tensor(a)).data


def band_energy(img, band: BandMask) -> float:
    c = dct_plane(img)
    return float(np.sum(c[band.mask(*c.shape)] ** 2))


def band_cosine(lr_up, hr, band: BandMask) -> float:
    """Cosine similarity of the band-masked DCT coefficients of two equal-size images."""
    a, b = _plane(lr_up), _plane(hr)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch {a.shape} vs {b.shape}; upsample the LR image first")
    m = band.mask(*a.shape)
    ca, cb = dct_plane(a), dct_plane(b)
    va, vb = ca[m], cb[m]
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    # a band holding only transform round-off counts as empty
    if na <= _EMPTY_BAND * np.linalg.norm(ca) or nb <= _EMPTY_BAND * np.linalg.norm(cb):
        return 0.0
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def upsample_to(lr, shape) -> np.ndarray:
    a = _plane(lr)
    h, w = shape[-2:]
    if h % a.shape[0] or w % a.shape[1] or h // a.shape[0] != w // a.shape[1]:
        raise ValueError(f"cannot upsample {a.shape} to {shape}")
    with dm.no_grad():
        return dm.resample(dm.Tensor(a), h // a.shape[0], "bilinear_up").data


def pair_band_cosines(lr_corpus, hr_corpus) -> dict[str, np.ndarray]:
    """Per-pair band cosines (LR bilinearly upsampled to HR size) for every band."""
    if len(lr_corpus) != len(hr_corpus):
        raise ValueError("LR and HR corpora differ in length")
    out = {b: np.zeros(len(hr_corpus)) for b in BANDS}
    for k, (lr, hr) in enumerate(zip(lr_corpus, hr_corpus)):
        up = upsample_to(lr, np.shape(hr))
        for b in BANDS:
            out[b][k] = band_cosine(up, hr, BandMask(b))
    return out


# --------------------------------------------------------------------------
# KDE
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def silverman_bandwidth(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return KDE_FALLBACK_BW
    sd = float(np.std(v, ddof=1))
    if sd == 0:
        return KDE_FALLBACK_BW
    return 1.06 * sd * v.size ** (-0.2)


def kde(values, bandwidth="auto") -> KdeCurve:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("kde of empty input")
    if bandwidth == "auto" or bandwidth is None:
        h = silverman_bandwidth(v)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ValueError("bandwidth must be positive")
    grid = np.linspace(v.min() - 4 * h, v.max() + 4 * h, KDE_GRID)
    z = (grid[:, None] - v[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (v.size * h * np.sqrt(2 * np.pi))
    return KdeCurve(grid, density, h)


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------


def _power(c: np.ndarray) -> tuple[np.ndarray, float]:
    # deterministic start: the covariance column with the largest norm
    norms = np.linalg.norm(c, axis=0)
    if norms.max() == 0:
        return np.zeros(c.shape[0]), 0.0
    v = c[:, int(np.argmax(norms))] / norms.max()
    for _ in range(PCA_ITERS):
        w = c @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return np.zeros_like(v), 0.0
        w /= nw
        done = np.linalg.norm(w - v) < PCA_TOL
        v = w
        if done:
            break
    k = int(np.argmax(np.abs(v)))
    if v[k] < 0:
        v = -v
    return v, float(v @ c @ v)


def pca_project(features, dims: int = 2) -> np.ndarray:
    """Mean-centred projection onto the leading principal directions (power iteration with deflation)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("pca_project needs at least 3 vectors of equal length")
    xc = x - x.mean(axis=0)
    c = xc.T @ xc / (len(x) - 1)
    scale = max(float(np.trace(c)), 1e-300)
    out = np.zeros((len(x), dims))
    for d in range(dims):
        v, lam = _power(c)
        if lam <= 1e-12 * scale:
            break  # remaining rank is numerically zero
        out[:, d] = xc @ v
        c = c - lam * np.outer(v, v)
    return out


# --------------------------------------------------------------------------
# corpus report
# --------------------------------------------------------------------------


def analyze_corpora(corpus_a, corpus_b, out_dir, hr=None, names=("A", "B")) -> dict:
    """Write lbp_histograms.csv, band_cosine.csv, kde_curves.csv, pca_points.csv.

    Band cosines need the HR counterparts; without ``hr`` they are computed
    between the two LR corpora instead (pairwise by index, equal sizes).
    """
    out_dir = Path(out_dir)
    corpora = dict(zip(names, (list(corpus_a), list(corpus_b))))
    hist_rows, hists, labels = [], [], []
    for name, corpus in corpora.items():
        for k, img in enumerate(corpus):
            h = lbp_histogram(img)
            hists.append(h)
            labels.append((name, k))
            hist_rows.append({"corpus": name, "index": k, **{f"b{i:03d}": float(h[i]) for i in range(256)}})
    write_csv(out_dir / "lbp_histograms.csv", hist_rows, ["corpus", "index"] + [f"b{i:03d}" for i in range(256)])

    cos_rows, kde_rows = [], []
    cos_sets = {}
    if hr is not None:
        for name, corpus in corpora.items():
            cos_sets[name] = pair_band_cosines(corpus, list(hr))
    else:
        a, b = corpora[names[0]], corpora[names[1]]
        cos_sets[f"{names[0]}-{names[1]}"] = {
            band: np.array([band_cosine(x, y, BandMask(band)) for x, y in zip(a, b)]) for band in BANDS
        }
    for name, per_band in cos_sets.items():
        for band, vals in per_band.items():
            cos_rows += [{"corpus": name, "index": k, "band": band, "cosine": float(v)} for k, v in enumerate(vals)]
            curve = kde(vals)
            kde_rows += [
                {"corpus": name, "band": band, "bandwidth": curve.bandwidth, "x": float(x), "density": float(d)}
                for x, d in zip(curve.grid, curve.density)
            ]
    write_csv(out_dir / "band_cosine.csv", cos_rows, ["corpus", "index", "band", "cosine"])
    write_csv(out_dir / "kde_curves.csv", kde_rows, ["corpus", "band", "bandwidth", "x", "density"])

    pts = pca_project(np.stack(hists))
    pca_rows = [{"corpus": c, "index": k, "pc1": float(p[0]), "pc2": float(p[1])} for (c, k), p in zip(labels, pts)]
    write_csv(out_dir / "pca_points.csv", pca_rows, ["corpus", "index", "pc1", "pc2"])

    inter, within = lbp_separation(corpora[names[0]], corpora[names[1]])
    summary = {"lbp_inter_l1": inter, "lbp_within_l1": within}
    for name, per_band in cos_sets.items():
        for band, vals in per_band.items():
            summary[f"cos_{name}_{band}"] = float(np.mean(vals))
    return summary
