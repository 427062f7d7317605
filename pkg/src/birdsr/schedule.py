"""Noise schedules and the timestep-dependent distortion/perception weight."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

COSINE_OFFSET = 0.008
MAX_BETA = 0.999
DEFAULT_KAPPA = 0.2
DEFAULT_GAMMA = 8.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients, index 0 is the clean endpoint.

    ``vp``:    x_t = alpha_t x0 + sigma_t eps
    ``shift``: x_t = alpha_t x0 + beta_t up(y) + sigma_t eps
    """

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    variant: str = "vp"
    beta: np.ndarray | None = None
    kappa: float | None = None

    def coeffs(self, t: int) -> tuple[float, float, float]:
        """(alpha, beta, sigma) at step t; beta is 0 for the vp variant."""
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        b = 0.0 if self.beta is None else float(self.beta[t])
        return float(self.alpha[t]), b, float(self.sigma[t])

    def invertible(self, t: int) -> bool:
        return self.alpha[t] > 0.0

    @property
    def max_invertible_t(self) -> int:
        return max(t for t in range(self.T + 1) if self.alpha[t] > 0.0)

    def to_dict(self) -> dict:
        d = {
            "T": self.T,
            "variant": self.variant,
            "alpha": self.alpha.tolist(),
            "sigma": self.sigma.tolist(),
        }
        if self.beta is not None:
            d["beta"] = self.beta.tolist()
            d["kappa"] = self.kappa
        return d


def _cosine_f(t: float, T: int) -> float:
    return math.cos(((t / T + COSINE_OFFSET) / (1 + COSINE_OFFSET)) * math.pi / 2) ** 2


def make_vp_schedule(T: int) -> NoiseSchedule:
    """Cosine cumulative schedule with alpha^2 + sigma^2 = 1.

    The raw cosine curve reaches alpha_T ~ 6e-17, which makes x0 unrecoverable
    at t=T; per-step betas are clipped at 0.999 so the terminal alpha stays
    positive. For T >= 2 only the last step is affected.
    """
    if int(T) != T or T < 1:
        raise ValueError("T must be a positive integer")
    T = int(T)
    f0 = _cosine_f(0, T)
    abar = np.array([_cosine_f(t, T) / f0 for t in range(T + 1)])
    abar[0] = 1.0
    for t in range(1, T + 1):
        abar[t] = max(abar[t], abar[t - 1] * (1.0 - MAX_BETA))
    alpha = np.sqrt(abar)
    sigma = np.sqrt(1.0 - abar)
    alpha[0], sigma[0] = 1.0, 0.0
    return NoiseSchedule(T=T, alpha=alpha, sigma=sigma, variant="vp")


def make_shift_schedule(T: int, kappa: float = DEFAULT_KAPPA) -> NoiseSchedule:
    """Residual-shifting interpolation: linear ramps plus kappa*sqrt(t/T) noise."""
    if int(T) != T or T < 1:
        raise ValueError("T must be a positive integer")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    T = int(T)
    frac = np.arange(T + 1) / T
    return NoiseSchedule(
        T=T,
        alpha=1.0 - frac,
        sigma=kappa * np.sqrt(frac),
        variant="shift",
        beta=frac.copy(),
        kappa=float(kappa),
    )


def make_schedule(variant: str, T: int, kappa: float = DEFAULT_KAPPA) -> NoiseSchedule:
    if variant == "vp":
        return make_vp_schedule(T)
    if variant == "shift":
        return make_shift_schedule(T, kappa)
    raise ValueError(f"unknown schedule variant {variant!r}")


@dataclass(frozen=True)
class WeightSchedule:
    T: int
    gamma: float = field(default=DEFAULT_GAMMA)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    def __call__(self, t: int) -> float:
        return lambda_weight(t, self)


def lambda_weight(t: int, ws: WeightSchedule) -> float:
    """(t/T)**gamma: 0 at the clean end, 1 at maximal noise."""
    if not 0 <= t <= ws.T:
        raise ValueError(f"timestep {t} outside [0, {ws.T}]")
    return (t / ws.T) ** ws.gamma
