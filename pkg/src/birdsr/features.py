"""Frozen random conv features, semantic alignment and the structural distortion loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .degrade import derive_rng

FEATURE_WEIGHT = 0.5
WIDTHS = (8, 16)


@dataclass(frozen=True)
class FrozenFeatures:
    seed: int
    arrays: dict

    @classmethod
    def create(cls, seed: int = 1234, channels: int = 1, dtype="float32") -> "FrozenFeatures":
        rng = derive_rng(seed, 0xFE)
        arrays = {}
        cin = channels
        for i, cout in enumerate(WIDTHS, start=1):
            w = rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(cin * 9)
            arrays[f"conv{i}.w"] = w.astype(dtype)
            arrays[f"conv{i}.b"] = np.zeros(cout, dtype=dtype)
            cin = cout
        for a in arrays.values():
            a.setflags(write=False)
        return cls(seed, arrays)

    def tensors(self) -> dict[str, dm.Tensor]:
        return {k: dm.Tensor(v) for k, v in self.arrays.items()}


def extract(f: FrozenFeatures, x) -> dm.Tensor:
    """(N, C, H, W) -> (N, 16, H/4, W/4); differentiable in x only."""
    x = x if isinstance(x, dm.Tensor) else dm.Tensor(np.asarray(x))
    if x.shape[-1] % 4 or x.shape[-2] % 4:
        raise ValueError(f"feature extractor needs dims divisible by 4, got {x.shape[-2:]}")
    p = f.tensors()
    h = dm.silu(dm.conv2d(x, p["conv1.w"], p["conv1.b"], stride=2, pad=1))
    return dm.conv2d(h, p["conv2.w"], p["conv2.b"], stride=2, pad=1)


def sem_align_loss(f: FrozenFeatures, x0_hat, x0_ref) -> dm.Tensor:
    """Mean squared feature difference; the reference output is a constant."""
    a = extract(f, x0_hat)
    ref = x0_ref.data if isinstance(x0_ref, dm.Tensor) else np.asarray(x0_ref)
    with dm.no_grad():
        b = extract(f, dm.Tensor(ref))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return dm.mean(dm.square(dm.sub(a, b)))


def struct_loss(f: FrozenFeatures, x0_hat, x0) -> dm.Tensor:
    """mean|x0_hat - x0| + 0.5 * mean (f(x0_hat) - f(x0))^2."""
    x0_hat = x0_hat if isinstance(x0_hat, dm.Tensor) else dm.Tensor(np.asarray(x0_hat))
    target = dm.Tensor(np.asarray(x0.data if isinstance(x0, dm.Tensor) else x0, dtype=x0_hat.dtype))
    if x0_hat.shape != target.shape:
        raise ValueError(f"shape mismatch {x0_hat.shape} vs {target.shape}")
    pixel = dm.mean(dm.absolute(dm.sub(x0_hat, target)))
    return dm.add(pixel, dm.scale(sem_align_loss(f, x0_hat, target), FEATURE_WEIGHT))
