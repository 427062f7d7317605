"""Conditional noise predictor eps_theta(x_t, t | y).

Four 3x3 conv layers with SiLU. The LR condition is nearest-upsampled and
concatenated to x_t; a sinusoidal timestep embedding is added per channel
after the input projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffmath as dm
from .degrade import derive_rng

LAYERS = ("in", "h1", "h2", "out")


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 1
    hidden_width: int = 16
    embed_dim: int = 16
    kernel: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        if self.embed_dim != self.hidden_width:
            raise ValueError("embed_dim must equal hidden_width (embedding is added per channel)")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")

    def layer_shapes(self) -> dict[str, tuple[int, int, int, int]]:
        c, w, k = self.channels, self.hidden_width, self.kernel
        return {"in": (w, 2 * c, k, k), "h1": (w, w, k, k), "h2": (w, w, k, k), "out": (c, w, k, k)}


class DenoiserParams(dict):
    """Ordered name -> Tensor mapping plus the config that built it."""

    def __init__(self, tensors: Mapping[str, dm.Tensor], cfg: DenoiserConfig):
        super().__init__(tensors)
        self.cfg = cfg

    @property
    def count(self) -> int:
        return sum(t.data.size for t in self.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None


@dataclass(frozen=True)
class ReferenceParams:
    """Frozen snapshot; forward passes never record gradients."""

    arrays: Mapping[str, np.ndarray]
    cfg: DenoiserConfig


def param_names() -> list[str]:
    return [f"{layer}.{kind}" for layer in LAYERS for kind in ("w", "b")]


def init_params(seed: int, cfg: DenoiserConfig = DenoiserConfig()) -> DenoiserParams:
    rng = derive_rng(seed, 0xD1)
    dtype = np.dtype(cfg.dtype)
    tensors = {}
    for layer, shape in cfg.layer_shapes().items():
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.standard_normal(shape) / np.sqrt(fan_in)
        tensors[f"{layer}.w"] = dm.Tensor(w.astype(dtype), requires_grad=True)
        tensors[f"{layer}.b"] = dm.Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=True)
    return DenoiserParams(tensors, cfg)


def params_from_arrays(arrays: Mapping[str, np.ndarray], cfg: DenoiserConfig) -> DenoiserParams:
    missing = set(param_names()) - set(arrays)
    if missing:
        raise KeyError(f"missing parameter tensors: {sorted(missing)}")
    return DenoiserParams({k: dm.Tensor(np.array(arrays[k]), requires_grad=True) for k in param_names()}, cfg)


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    omega = 10000.0 ** (-2.0 * np.arange(half) / dim)
    return np.concatenate([np.sin(t * omega), np.cos(t * omega)])


def _as_tensor(x, dtype) -> dm.Tensor:
    if isinstance(x, dm.Tensor):
        return x
    return dm.Tensor(np.asarray(x, dtype=dtype))


def _apply(p: Mapping[str, dm.Tensor], cfg: DenoiserConfig, x_t, y, t: int) -> dm.Tensor:
    dtype = np.dtype(cfg.dtype)
    x_t = _as_tensor(x_t, dtype)
    y = np.asarray(y.data if isinstance(y, dm.Tensor) else y, dtype=dtype)
    if x_t.data.ndim != y.ndim:
        raise ValueError(f"x_t {x_t.shape} and y {y.shape} ranks differ")
    h, w = x_t.shape[-2:]
    if h % y.shape[-2] or w % y.shape[-1] or h // y.shape[-2] != w // y.shape[-1]:
        raise ValueError(f"LR {y.shape[-2:]} does not upsample to {x_t.shape[-2:]}")
    factor = h // y.shape[-2]
    y_up = y.repeat(factor, axis=-2).repeat(factor, axis=-1)
    if y_up.shape != x_t.shape:
        raise ValueError(f"upsampled LR {y_up.shape} mismatches x_t {x_t.shape}")
    pad = cfg.kernel // 2
    inp = dm.concat([x_t, dm.Tensor(y_up)], axis=-3)
    hdn = dm.conv2d(inp, p["in.w"], p["in.b"], pad=pad)
    temb = dm.Tensor(timestep_embedding(t, cfg.embed_dim).astype(dtype))
    hdn = dm.silu(dm.add_channel_bias(hdn, temb))
    hdn = dm.silu(dm.conv2d(hdn, p["h1.w"], p["h1.b"], pad=pad))
    hdn = dm.silu(dm.conv2d(hdn, p["h2.w"], p["h2.b"], pad=pad))
    return dm.conv2d(hdn, p["out.w"], p["out.b"], pad=pad)


def forward(params: DenoiserParams, x_t, y, t: int) -> dm.Tensor:
    """eps_hat with the same shape as x_t; accepts (C,H,W) or batched (N,C,H,W)."""
    return _apply(params, params.cfg, x_t, y, t)


def snapshot_reference(params: DenoiserParams) -> ReferenceParams:
    arrays = {k: v.data.copy() for k, v in params.items()}
    for a in arrays.values():
        a.setflags(write=False)
    return ReferenceParams(arrays, params.cfg)


def predict_reference(ref: ReferenceParams, x_t, y, t: int) -> dm.Tensor:
    frozen = {k: dm.Tensor(v) for k, v in ref.arrays.items()}
    with dm.no_grad():
        return _apply(frozen, ref.cfg, x_t, y, t)


def as_predictor(model):
    """Callable (x_t, y, t) -> eps_hat for either live params or a reference snapshot."""
    if isinstance(model, ReferenceParams):
        return lambda x, y, t: predict_reference(model, x, y, t)
    return lambda x, y, t: forward(model, x, y, t)
