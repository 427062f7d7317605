"""Differentiable no-reference reward proxies and the preference losses built on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm

EPS_NUM = 1e-8
REWARD_KINDS = ("band_energy", "tv_target")


# per-kind saturation slope used when none is given
DEFAULT_SLOPE = {"band_energy": 20.0, "tv_target": 0.1}
# mean TV of the default family-A training HR images (0.1069)
DEFAULT_TARGET_TV = 0.107


@dataclass(frozen=True)
class RewardFn:
    """band_energy: tanh(slope * high-band DCT energy fraction).
    tv_target: exp(-((TV - target_tv) / slope)^2).
    """

    kind: str = "tv_target"
    band_threshold: float = 0.5
    slope: float | None = None
    target_tv: float = DEFAULT_TARGET_TV

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.slope is None:
            object.__setattr__(self, "slope", DEFAULT_SLOPE[self.kind])
        if not 0.0 < self.band_threshold <= 1.0:
            raise ValueError("band_threshold must lie in (0, 1]")
        if not self.slope > 0:
            raise ValueError("slope must be positive")


@dataclass(frozen=True)
class PreferenceFn:
    kind: str = "relu_hinge"
    margin: float = 1.0

    def __call__(self, v: dm.Tensor) -> dm.Tensor:
        return dm.relu(v)


def _as_batch(x) -> dm.Tensor:
    x = x if isinstance(x, dm.Tensor) else dm.Tensor(np.asarray(x))
    if x.data.size == 0:
        raise ValueError("empty image")
    if x.data.ndim == 2:
        x = dm.reshape(x, (1, 1) + x.shape)
    elif x.data.ndim == 3:
        x = dm.reshape(x, (1,) + x.shape)
    return x


def high_band_mask(h: int, w: int, threshold: float) -> np.ndarray:
    i, j = np.mgrid[0:h, 0:w]
    u = (i + j) / max(h + w - 2, 1)
    return u >= threshold


def _tv(x: dm.Tensor) -> dm.Tensor:
    """Per-image mean smoothed absolute finite difference, shape (N,)."""
    dy = dm.sub(dm.take(x, np.s_[..., 1:, :]), dm.take(x, np.s_[..., :-1, :]))
    dx = dm.sub(dm.take(x, np.s_[..., :, 1:]), dm.take(x, np.s_[..., :, :-1]))
    parts = []
    for d in (dy, dx):
        smooth_abs = dm.sqrt(dm.add(dm.square(d), dm.Tensor(np.full(d.shape, 1e-6, dtype=d.dtype))))
        per = dm.sum_axes(smooth_abs, (1, 2, 3))
        parts.append(dm.scale(per, 1.0 / np.prod(d.shape[1:])))
    return dm.add(parts[0], parts[1])


def reward_per_image(x, r: RewardFn) -> dm.Tensor:
    """Reward of each image in a (N, C, H, W) batch, shape (N,), values in [0, 1]."""
    x = _as_batch(x)
    n = x.shape[0]
    if r.kind == "band_energy":
        coef = dm.dct2(x)
        energy = dm.square(coef)
        mask = high_band_mask(*x.shape[-2:], r.band_threshold)
        mask_t = dm.Tensor(np.broadcast_to(mask, x.shape).astype(x.dtype))
        high = dm.sum_axes(dm.mul(energy, mask_t), (1, 2, 3))
        tot = dm.add(dm.sum_axes(energy, (1, 2, 3)), dm.Tensor(np.full(n, EPS_NUM, dtype=x.dtype)))
        return dm.tanh(dm.scale(dm.div(high, tot), r.slope))
    tv = _tv(x)
    z = dm.scale(dm.sub(tv, dm.Tensor(np.full(n, r.target_tv, dtype=x.dtype))), 1.0 / r.slope)
    return dm.exp(dm.scale(dm.square(z), -1.0))


def reward(x, r: RewardFn) -> dm.Tensor:
    """Batch-mean reward (scalar)."""
    return dm.mean(reward_per_image(x, r))


def reward_values(x, r: RewardFn) -> np.ndarray:
    with dm.no_grad():
        return reward_per_image(dm.Tensor(np.asarray(x.data if isinstance(x, dm.Tensor) else x)), r).data.copy()


def pair_loss(x0, x0_hat, r: RewardFn, phi: PreferenceFn = PreferenceFn()) -> dm.Tensor:
    """Mean over the batch of phi(r(x0) - r(x0_hat)); x0 is treated as a constant."""
    clean = reward_values(x0, r)
    pred = reward_per_image(x0_hat, r)
    adv = dm.sub(dm.Tensor(clean.astype(pred.dtype)), pred)
    return dm.mean(phi(adv))


def unpair_loss(x0_hat, r: RewardFn, phi: PreferenceFn = PreferenceFn(), tau: float | None = None) -> dm.Tensor:
    """Mean over the batch of phi(tau - r(x0_hat))."""
    tau = phi.margin if tau is None else tau
    pred = reward_per_image(x0_hat, r)
    gap = dm.sub(dm.Tensor(np.full(pred.shape, tau, dtype=pred.dtype)), pred)
    return dm.mean(phi(gap))
