"""Forward noising, closed-form x0 recovery, and deterministic reverse sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .degrade import derive_rng
from .denoiser import as_predictor
from .schedule import NoiseSchedule


@dataclass
class DiffusionState:
    x_t: np.ndarray
    t: int
    eps_used: np.ndarray | None = None


@dataclass
class SampleTrace:
    states: list[DiffusionState] = field(default_factory=list)
    stop_grad_boundary: int = 1
    renoised: DiffusionState | None = None

    def timesteps(self) -> list[int]:
        return [s.t for s in self.states]

    def x0_snapshots(self) -> np.ndarray:
        return np.stack([s.x_t for s in self.states])


def _t(x, dtype=None) -> dm.Tensor:
    if isinstance(x, dm.Tensor):
        return x
    return dm.Tensor(np.asarray(x, dtype=dtype))


def upsample_condition(y, shape) -> np.ndarray:
    """Bilinear upsampling of the LR condition to ``shape`` (the shift variant's residual anchor)."""
    y = np.asarray(y.data if isinstance(y, dm.Tensor) else y)
    factor = shape[-1] // y.shape[-1]
    if factor * y.shape[-1] != shape[-1] or factor * y.shape[-2] != shape[-2]:
        raise ValueError(f"LR {y.shape} does not upsample to {shape}")
    rows = dm.resample_matrix(y.shape[-2], factor, "bilinear_up").astype(y.dtype)
    cols = dm.resample_matrix(y.shape[-1], factor, "bilinear_up").astype(y.dtype)
    return rows @ y @ cols.T


def _anchor(sched: NoiseSchedule, y_up, like: dm.Tensor) -> dm.Tensor | None:
    if sched.variant != "shift":
        return None
    if y_up is None:
        raise ValueError("shift schedule needs the upsampled LR condition")
    anchor = _t(y_up, like.dtype)
    if anchor.shape != like.shape:
        raise ValueError(f"shape mismatch: anchor {anchor.shape} vs {like.shape}")
    return anchor


def add_noise(x0, t: int, eps, sched: NoiseSchedule, y_up=None) -> dm.Tensor:
    """x_t = alpha_t x0 (+ beta_t up(y)) + sigma_t eps."""
    x0 = _t(x0)
    eps = _t(eps, x0.dtype)
    if eps.shape != x0.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    a, b, s = sched.coeffs(t)
    if t == 0:
        return x0
    out = dm.add(dm.scale(x0, a), dm.scale(eps, s))
    anchor = _anchor(sched, y_up, x0)
    if anchor is not None:
        out = dm.add(out, dm.scale(anchor, b))
    return out


def predict_x0(x_t, t: int, eps_hat, sched: NoiseSchedule, y_up=None) -> dm.Tensor:
    """Invert the forward map for x0 given a noise estimate."""
    x_t = _t(x_t)
    eps_hat = _t(eps_hat, x_t.dtype)
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"shape mismatch: x_t {x_t.shape} vs eps {eps_hat.shape}")
    if t == 0:
        return x_t
    a, b, s = sched.coeffs(t)
    if a <= 0.0:
        raise ValueError(f"alpha_{t} = 0: x0 is not recoverable at this timestep")
    resid = dm.sub(x_t, dm.scale(eps_hat, s))
    anchor = _anchor(sched, y_up, x_t)
    if anchor is not None:
        resid = dm.sub(resid, dm.scale(anchor, b))
    return dm.scale(resid, 1.0 / a)


def _x0_estimate(x_t, t, eps_hat, sched, y_up, clip):
    if sched.alpha[t] <= 0.0:
        # no signal left (shift variant endpoint): the LR anchor is the only estimate
        x0 = _t(np.asarray(y_up, dtype=_t(x_t).dtype))
    else:
        x0 = predict_x0(x_t, t, eps_hat, sched, y_up)
    if clip:
        x0 = dm.Tensor(np.clip(x0.data, 0.0, 1.0)) if not x0.requires_grad else x0
    return x0


def reverse_step(x_t, t: int, eps_hat, sched: NoiseSchedule, y_up=None, clip: bool = False) -> dm.Tensor:
    """Deterministic (eta = 0) update x_t -> x_{t-1}."""
    if t < 1:
        raise ValueError("reverse_step needs t >= 1")
    x0 = _x0_estimate(x_t, t, eps_hat, sched, y_up, clip)
    if t == 1:
        return x0  # alpha_0 = 1, sigma_0 = 0
    a, b, s = sched.coeffs(t - 1)
    out = dm.add(dm.scale(x0, a), dm.scale(_t(eps_hat, x0.dtype), s))
    anchor = _anchor(sched, y_up, x0)
    if anchor is not None:
        out = dm.add(out, dm.scale(anchor, b))
    return out


def initial_state(y, sched: NoiseSchedule, scale: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """x_T: pure noise (vp) or LR anchor plus noise (shift)."""
    y = np.asarray(y)
    shape = y.shape[:-2] + (y.shape[-2] * scale, y.shape[-1] * scale)
    eps = rng.standard_normal(shape).astype(y.dtype)
    _, b, s = sched.coeffs(sched.T)
    x_T = s * eps
    if sched.variant == "shift":
        x_T = x_T + b * upsample_condition(y, shape)
    return x_T.astype(y.dtype), eps


def _model_dtype(model):
    cfg = getattr(model, "cfg", None)
    return np.dtype(cfg.dtype) if cfg is not None else np.float32


def sample(model, y, sched: NoiseSchedule, seed: int, scale: int = 4, clip: bool = True) -> tuple[np.ndarray, SampleTrace]:
    """Full no-grad reverse trajectory T -> 0; returns the final x0 and its trace."""
    predictor = as_predictor(model)
    y = np.asarray(y, dtype=_model_dtype(model))
    x, eps = initial_state(y, sched, scale, derive_rng(seed, 0xA1))
    y_up = upsample_condition(y, x.shape) if sched.variant == "shift" else None
    trace = SampleTrace(stop_grad_boundary=0)
    trace.states.append(DiffusionState(x, sched.T, eps))
    with dm.no_grad():
        for t in range(sched.T, 0, -1):
            eps_hat = predictor(x, y, t)
            x = reverse_step(x, t, eps_hat, sched, y_up, clip=clip).data
            trace.states.append(DiffusionState(x, t - 1, eps_hat.data))
    return x, trace


def sample_with_last_step_grad(
    y, sched: NoiseSchedule, params, eps_seed: int, scale: int = 4, boundary: int = 1
) -> tuple[dm.Tensor, SampleTrace]:
    """No-grad trajectory to x0, re-noise to x_boundary with fresh eps, then grad-enabled steps to 0.

    With boundary = 1 this is exactly: x_1 = alpha_1 sg(x0) + sigma_1 eps and
    x0_final = (x_1 - sigma_1 eps_theta(x_1, 1 | y)) / alpha_1.
    """
    if not 1 <= boundary <= sched.T:
        raise ValueError(f"boundary must lie in [1, {sched.T}]")
    x0, trace = sample(params, y, sched, eps_seed, scale=scale)
    trace.stop_grad_boundary = boundary
    y = np.asarray(y, dtype=_model_dtype(params))
    fresh = derive_rng(eps_seed, 0xA2).standard_normal(x0.shape).astype(x0.dtype)
    y_up = upsample_condition(y, x0.shape) if sched.variant == "shift" else None
    x = add_noise(dm.detach(dm.Tensor(x0)), boundary, fresh, sched, y_up)
    trace.renoised = DiffusionState(x.data.copy(), boundary, fresh)
    predictor = as_predictor(params)
    for t in range(boundary, 0, -1):
        x = reverse_step(x, t, predictor(x, y, t), sched, y_up)
    return x, trace
