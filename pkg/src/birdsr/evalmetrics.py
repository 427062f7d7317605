"""Full-reference metrics and the held-out evaluation harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffusion import sample
from .features import FrozenFeatures, struct_loss
from .rewards import RewardFn, reward_values
from .schedule import NoiseSchedule

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 1.0


def psnr(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _box_means(x: np.ndarray, win: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, (win, win), axis=(-2, -1)).mean(axis=(-2, -1))


def ssim(a, b, win: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all win x win windows (stride 1, uniform weights, population moments)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[-1] < win or a.shape[-2] < win:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {win}x{win} window")
    c1, c2 = (SSIM_K1 * SSIM_L) ** 2, (SSIM_K2 * SSIM_L) ** 2
    mu_a, mu_b = _box_means(a, win), _box_means(b, win)
    var_a = _box_means(a * a, win) - mu_a**2
    var_b = _box_means(b * b, win) - mu_b**2
    cov = _box_means(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    label: str = ""

    COLUMNS = ("label", "index", "psnr", "ssim", "struct_loss", "reward")

    def mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.rows]))

    def std(self, key: str) -> float:
        return float(np.std([r[key] for r in self.rows]))

    def summary(self) -> dict:
        out = {"label": self.label, "n": len(self.rows)}
        for key in ("psnr", "ssim", "struct_loss", "reward"):
            out[f"{key}_mean"] = self.mean(key)
            out[f"{key}_std"] = self.std(key)
        return out


def evaluate(
    model,
    eval_hr: np.ndarray,
    eval_lr: np.ndarray,
    sched: NoiseSchedule,
    reward_fn: RewardFn,
    feats: FrozenFeatures,
    seed: int = 0,
    scale: int = 4,
    label: str = "",
) -> EvalReport:
    """Sample SR outputs for held-out LR inputs and score them against the hidden HR."""
    if len(eval_lr) == 0:
        raise ValueError("empty evaluation set")
    sr, _ = sample(model, eval_lr, sched, seed, scale=scale)
    sr = np.clip(sr, 0.0, 1.0)
    rewards = reward_values(sr, reward_fn)
    report = EvalReport(label=label)
    with dm.no_grad():
        for i in range(len(eval_lr)):
            d = struct_loss(feats, sr[i : i + 1], eval_hr[i : i + 1]).item()
            report.rows.append(
                {
                    "label": label,
                    "index": i,
                    "psnr": psnr(sr[i], eval_hr[i]),
                    "ssim": ssim(sr[i], eval_hr[i]),
                    "struct_loss": d,
                    "reward": float(rewards[i]),
                }
            )
    return report
