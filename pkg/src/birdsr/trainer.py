"""Bidirectional reward-guided fine-tuning loop.

Each iteration runs some mix of two gradient updates on a shared Adam state:

* forward branch (paired family-A data): inject noise into the HR image at a
  random t, recover x0 in one step, and minimise
  lambda(t) * w_r * L_pair + (1 - lambda(t)) * L_struct.
* reverse branch (LR-only data): sample the full chain without gradients,
  re-noise to x_1 and take one grad-enabled step, then minimise
  L_unpair + lambda_sem * L_sem_align against a frozen reference model.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import diffmath as dm
from .degrade import (
    PairedSource,
    UnpairedSource,
    derive_rng,
    family_a,
    family_b,
    gen_corpus,
    paired_source,
    unpaired_source,
)
from .denoiser import (
    DenoiserConfig,
    DenoiserParams,
    ReferenceParams,
    forward,
    init_params,
    param_names,
    params_from_arrays,
    snapshot_reference,
)
from .diffusion import add_noise, predict_x0, sample_with_last_step_grad, upsample_condition
from .evalmetrics import EvalReport, evaluate
from .features import FrozenFeatures, sem_align_loss, struct_loss
from .formats import FormatError, load_checkpoint, save_checkpoint, write_csv, write_json
from .rewards import DEFAULT_TARGET_TV, PreferenceFn, RewardFn, pair_loss, reward_values, unpair_loss
from .schedule import NoiseSchedule, WeightSchedule, lambda_weight, make_schedule

log = logging.getLogger(__name__)

VARIANTS = ("forward_only", "reverse_only", "all_reverse", "mixed")
ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8

_STREAM_FWD, _STREAM_REV, _STREAM_PRE, _STREAM_PROBE = 11, 12, 13, 14


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or gradient)."""


@dataclass
class TrainingConfig:
    iterations: int = 2000
    lr: float = 1e-4
    gamma: float = 8.0
    lambda_sem: float = 0.001
    reward_weight: float = 0.0003
    T: int = 16
    batch_k: int = 4
    seed: int = 0
    variant: str = "mixed"
    reward_kind: str = "tv_target"
    schedule_variant: str = "vp"
    kappa: float = 0.2
    # reward proxy parameters; reward_slope 0 picks the per-kind default
    band_threshold: float = 0.5
    reward_slope: float = 0.0
    target_tv: float = DEFAULT_TARGET_TV
    tau: float = 1.0
    # network and data
    hidden_width: int = 16
    hr_size: int = 32
    scale: int = 4
    data_seed: int = 0
    n_train_a: int = 64
    n_train_b: int = 64
    n_eval: int = 16
    feature_seed: int = 1234
    # supervised warm start standing in for the pretrained backbone
    pretrain_iters: int = 1500
    pretrain_lr: float = 2e-3
    # schedule of the bidirectional loop
    reverse_every: int = 1
    grad_boundary: int = 1
    checkpoint_every: int = 0
    eval_every: int = 0
    dtype: str = "float32"

    def validate(self) -> "TrainingConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        positive = ("lr", "gamma", "T", "batch_k", "hidden_width", "hr_size", "scale", "kappa")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        nonneg = (
            "iterations", "lambda_sem", "reward_weight", "reward_slope", "pretrain_iters", "checkpoint_every", "eval_every",
        )  # fmt: skip
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.reverse_every < 1:
            raise ValueError("reverse_every must be >= 1")
        if not 1 <= self.grad_boundary <= self.T:
            raise ValueError("grad_boundary must lie in [1, T]")
        if self.batch_k > min(self.n_train_a, self.n_train_b):
            raise ValueError("batch_k exceeds a training corpus")
        if self.hr_size % self.scale or self.hr_size % 8:
            raise ValueError("hr_size must be a multiple of 8 and of scale")
        return self

    def replace(self, **kw) -> "TrainingConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_strings(cls, values: dict[str, str], base: "TrainingConfig | None" = None) -> "TrainingConfig":
        """Typed parse of string key/values (config file or CLI overrides)."""
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            typ = types[key]
            try:
                kw[key] = typ(float(raw)) if typ is int and "e" in raw.lower() else typ(raw)
            except ValueError:
                raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None
        return dataclasses.replace(base, **kw)


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    COLUMNS = [
        "iter",
        "branch",
        "family",
        "t_sampled",
        "lam",
        "L_pair",
        "L_struct",
        "L_forward",
        "L_unpair",
        "L_sem",
        "L_reverse",
        "reward_pred",
        "reward_clean",
        "pair_active",
        "grad_norm",
    ]
    EVAL_COLUMNS = ["iter", "reward_mean", "struct_loss_mean", "psnr_mean", "ssim_mean", "sem_probe"]

    def branch(self, name: str) -> list[dict]:
        return [r for r in self.records if r["branch"] == name]

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        write_csv(out_dir / "runlog.csv", self.records, self.COLUMNS)
        if self.evals:
            write_csv(out_dir / "evals.csv", self.evals, self.EVAL_COLUMNS)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


# each branch keeps its own moments so one branch's gradient scale cannot
# shrink the other's steps through a shared second-moment estimate
BRANCHES = ("forward", "reverse")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        arrays = params.arrays() if hasattr(params, "arrays") else params
        return cls({k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_update(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam step (beta1 0.9, beta2 0.999, eps 1e-8)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise dm.NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    c1 = 1.0 - ADAM_B1**state.step
    c2 = 1.0 - ADAM_B2**state.step
    for name, p in params.items():
        data = p.data if isinstance(p, dm.Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(data)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_B1
        m += (1.0 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1.0 - ADAM_B2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        data -= step.astype(data.dtype)


def _grads(params: DenoiserParams) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


@dataclass
class TrainingData:
    paired_a: PairedSource
    unpaired_a: UnpairedSource  # family-A LR only, for the all_reverse variant
    unpaired_b: UnpairedSource
    eval_hr: np.ndarray  # hidden HR of the held-out family-B pairs; evaluation only
    eval_lr: np.ndarray

    def checksums(self) -> dict[str, str]:
        def h(a):
            return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()

        return {
            "train_a_hr": h(self.paired_a.hr),
            "train_a_lr": h(self.paired_a.lr),
            "train_b_lr": h(self.unpaired_b.lr),
            "eval_b_hr": h(self.eval_hr),
            "eval_b_lr": h(self.eval_lr),
        }


def build_data(cfg: TrainingConfig) -> TrainingData:
    n_a, n_b, n_e = cfg.n_train_a, cfg.n_train_b, cfg.n_eval
    corpus = gen_corpus(n_a + n_b + n_e, cfg.hr_size, cfg.data_seed, scale=cfg.scale)
    corpus_a, corpus_b, corpus_e = corpus[:n_a], corpus[n_a : n_a + n_b], corpus[n_a + n_b :]
    cfg_a = family_a(seed=cfg.data_seed, scale=cfg.scale)
    cfg_b = family_b(seed=cfg.data_seed + 1, scale=cfg.scale)
    paired = paired_source(corpus_a, cfg_a)
    unpaired_a = UnpairedSource(paired.lr.copy(), cfg_a.family)
    unpaired_b = unpaired_source(corpus_b, cfg_b)
    cfg_e = family_b(seed=cfg.data_seed + 2, scale=cfg.scale)
    eval_src = paired_source(corpus_e, cfg_e)
    return TrainingData(paired, unpaired_a, unpaired_b, eval_src.hr, eval_src.lr)


# --------------------------------------------------------------------------
# the two branches
# --------------------------------------------------------------------------


@dataclass
class Components:
    sched: NoiseSchedule
    weights: WeightSchedule
    reward: RewardFn
    phi: PreferenceFn
    feats: FrozenFeatures

    @classmethod
    def from_config(cls, cfg: TrainingConfig) -> "Components":
        return cls(
            sched=make_schedule(cfg.schedule_variant, cfg.T, cfg.kappa),
            weights=WeightSchedule(T=cfg.T, gamma=cfg.gamma),
            reward=RewardFn(
                kind=cfg.reward_kind,
                band_threshold=cfg.band_threshold,
                slope=cfg.reward_slope or None,
                target_tv=cfg.target_tv,
            ),
            phi=PreferenceFn(margin=cfg.tau),
            feats=FrozenFeatures.create(cfg.feature_seed, dtype=cfg.dtype),
        )


def forward_losses(params, batch, t: int, eps: np.ndarray, comp: Components, cfg: TrainingConfig) -> dict:
    """Loss terms of the forward branch for a given (t, eps); no update."""
    hr, lr = batch.hr, batch.lr
    y_up = upsample_condition(lr, hr.shape) if comp.sched.variant == "shift" else None
    x_t = add_noise(hr, t, eps, comp.sched, y_up)
    eps_hat = forward(params, x_t, lr, t)
    x0_hat = predict_x0(x_t, t, eps_hat, comp.sched, y_up)
    l_pair = pair_loss(hr, x0_hat, comp.reward, comp.phi)
    l_struct = struct_loss(comp.feats, x0_hat, hr)
    lam = lambda_weight(t, comp.weights)
    l_fwd = dm.add(dm.scale(l_pair, lam * cfg.reward_weight), dm.scale(l_struct, 1.0 - lam))
    r_pred = reward_values(x0_hat, comp.reward)
    r_clean = reward_values(hr, comp.reward)
    return {
        "loss": l_fwd,
        "t_sampled": t,
        "lam": lam,
        "L_pair": l_pair.item(),
        "L_struct": l_struct.item(),
        "L_forward": l_fwd.item(),
        "reward_pred": float(r_pred.mean()),
        "reward_clean": float(r_clean.mean()),
        "pair_active": int(np.sum(r_clean > r_pred)),
    }


def forward_branch_step(params, batch, cfg: TrainingConfig, comp: Components, adam: AdamState, rng) -> dict:
    t = int(rng.integers(1, comp.sched.max_invertible_t + 1))
    eps = rng.standard_normal(batch.hr.shape).astype(cfg.dtype)
    params.zero_grad()
    terms = forward_losses(params, batch, t, eps, comp, cfg)
    dm.backward(terms.pop("loss"))
    grads = _grads(params)
    terms["grad_norm"] = _grad_norm(grads)
    adam_update(params, grads, adam, cfg.lr)
    return terms


def reverse_losses(params, ref: ReferenceParams, lr: np.ndarray, eps_seed: int, comp: Components, cfg) -> dict:
    x0_hat, _ = sample_with_last_step_grad(
        lr, comp.sched, params, eps_seed, scale=cfg.scale, boundary=cfg.grad_boundary
    )
    x0_ref, _ = sample_with_last_step_grad(lr, comp.sched, ref, eps_seed, scale=cfg.scale, boundary=cfg.grad_boundary)
    l_unpair = unpair_loss(x0_hat, comp.reward, comp.phi, cfg.tau)
    l_sem = sem_align_loss(comp.feats, x0_hat, x0_ref)
    l_rev = dm.add(l_unpair, dm.scale(l_sem, cfg.lambda_sem))
    return {
        "loss": l_rev,
        "L_unpair": l_unpair.item(),
        "L_sem": l_sem.item(),
        "L_reverse": l_rev.item(),
        "reward_pred": float(reward_values(x0_hat, comp.reward).mean()),
    }


def reverse_branch_step(params, ref, batch, cfg: TrainingConfig, comp: Components, adam: AdamState, rng) -> dict:
    eps_seed = int(rng.integers(2**62))
    params.zero_grad()
    terms = reverse_losses(params, ref, batch.lr, eps_seed, comp, cfg)
    dm.backward(terms.pop("loss"))
    grads = _grads(params)
    terms["grad_norm"] = _grad_norm(grads)
    adam_update(params, grads, adam, cfg.lr)
    return terms


# --------------------------------------------------------------------------
# pretraining (stand-in for the pretrained SR backbone)
# --------------------------------------------------------------------------

_PRETRAIN_CACHE: dict[tuple, dict[str, np.ndarray]] = {}


def _pretrain_key(cfg: TrainingConfig) -> tuple:
    keys = (
        "seed", "pretrain_iters", "pretrain_lr", "T", "batch_k", "schedule_variant", "kappa",
        "hidden_width", "hr_size", "scale", "data_seed", "n_train_a", "n_train_b", "n_eval", "dtype",
    )  # fmt: skip
    return tuple(getattr(cfg, k) for k in keys)


def pretrain(params: DenoiserParams, data: TrainingData, cfg: TrainingConfig, sched: NoiseSchedule) -> None:
    """Plain noise-prediction MSE on family-A pairs (t uniform in 1..T)."""
    key = _pretrain_key(cfg)
    if key in _PRETRAIN_CACHE:
        for name, arr in _PRETRAIN_CACHE[key].items():
            params[name].data = arr.copy()
        return
    adam = AdamState.zeros_like(params)
    for it in range(cfg.pretrain_iters):
        rng = derive_rng(cfg.seed, _STREAM_PRE, it)
        batch = data.paired_a.batch(cfg.batch_k, rng)
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(batch.hr.shape).astype(cfg.dtype)
        y_up = upsample_condition(batch.lr, batch.hr.shape) if sched.variant == "shift" else None
        x_t = add_noise(batch.hr, t, eps, sched, y_up)
        params.zero_grad()
        eps_hat = forward(params, x_t, batch.lr, t)
        loss = dm.mean(dm.square(dm.sub(eps_hat, dm.Tensor(eps))))
        dm.backward(loss)
        adam_update(params, _grads(params), adam, cfg.pretrain_lr)
    _PRETRAIN_CACHE[key] = {k: v.data.copy() for k, v in params.items()}


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def checkpoint_entries(params, optim: dict, ref: ReferenceParams, feats: FrozenFeatures, iteration: int) -> dict:
    entries: dict[str, np.ndarray] = {}
    for name in param_names():
        entries[f"param.{name}"] = params[name].data
    for branch in BRANCHES:
        for name in param_names():
            entries[f"adam.{branch}.m.{name}"] = optim[branch].m[name]
            entries[f"adam.{branch}.v.{name}"] = optim[branch].v[name]
        entries[f"adam.{branch}.step"] = np.array([optim[branch].step], dtype=np.float32)
    for name in param_names():
        entries[f"ref.{name}"] = np.asarray(ref.arrays[name])
    for name, arr in feats.arrays.items():
        entries[f"feat.{name}"] = arr
    entries["state.iteration"] = np.array([iteration], dtype=np.float32)
    return entries


def restore_checkpoint(entries: dict, dcfg: DenoiserConfig, feats: FrozenFeatures):
    try:
        params = params_from_arrays({n: entries[f"param.{n}"] for n in param_names()}, dcfg)
        optim = {
            b: AdamState(
                {n: entries[f"adam.{b}.m.{n}"].copy() for n in param_names()},
                {n: entries[f"adam.{b}.v.{n}"].copy() for n in param_names()},
                int(entries[f"adam.{b}.step"][0]),
            )
            for b in BRANCHES
        }
        ref = snapshot_reference(params_from_arrays({n: entries[f"ref.{n}"] for n in param_names()}, dcfg))
        iteration = int(entries["state.iteration"][0])
    except KeyError as exc:
        raise FormatError(f"checkpoint missing entry {exc}") from None
    for name, arr in feats.arrays.items():
        stored = entries.get(f"feat.{name}")
        if stored is None or not np.array_equal(stored, arr):
            raise FormatError(f"feature extractor weights differ from checkpoint ({name})")
    return params, optim, ref, iteration


# --------------------------------------------------------------------------
# main loop
# --------------------------------------------------------------------------


def _branch_plan(cfg: TrainingConfig, it: int) -> list[tuple[str, str]]:
    """(branch, family) updates performed at iteration ``it``."""
    if cfg.variant == "forward_only":
        return [("forward", "A")]
    if cfg.variant == "reverse_only":
        return [("reverse", "B")]
    if cfg.variant == "all_reverse":
        return [("reverse", "A"), ("reverse", "B")]
    plan = [("forward", "A")]
    if it % cfg.reverse_every == 0:
        plan.append(("reverse", "B"))
    return plan


def sem_probe(params, ref, data: TrainingData, comp: Components, cfg: TrainingConfig) -> float:
    """Semantic-alignment loss on a fixed family-B probe batch with fixed sampling seeds."""
    lr = data.unpaired_b.lr[: cfg.batch_k]
    with dm.no_grad():
        a, _ = sample_with_last_step_grad(lr, comp.sched, params, cfg.seed, scale=cfg.scale, boundary=cfg.grad_boundary)
        b, _ = sample_with_last_step_grad(lr, comp.sched, ref, cfg.seed, scale=cfg.scale, boundary=cfg.grad_boundary)
        return sem_align_loss(comp.feats, a, b).item()


def manifest(cfg: TrainingConfig, comp: Components, data: TrainingData) -> dict:
    return {
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": {"seed": cfg.seed, "data_seed": cfg.data_seed, "feature_seed": cfg.feature_seed},
        "schedule": comp.sched.to_dict(),
        "weights": [lambda_weight(t, comp.weights) for t in range(cfg.T + 1)],
        "corpus_checksums": data.checksums(),
    }


@dataclass
class TrainResult:
    params: DenoiserParams
    log: RunLog
    reference: ReferenceParams
    optim: dict[str, AdamState]
    data: TrainingData
    components: Components
    wall_clock: float
    iteration: int


def train(
    cfg: TrainingConfig,
    out_dir=None,
    resume_from=None,
    stop_at: int | None = None,
    on_iteration: Callable[[int, DenoiserParams, ReferenceParams], None] | None = None,
) -> TrainResult:
    """Run the configured variant; ``stop_at`` ends early (for split/resume runs)."""
    cfg.validate()
    t_start = time.perf_counter()
    comp = Components.from_config(cfg)
    data = build_data(cfg)
    dcfg = DenoiserConfig(hidden_width=cfg.hidden_width, embed_dim=cfg.hidden_width, dtype=cfg.dtype)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        write_json(out_dir / "manifest.json", manifest(cfg, comp, data))

    if resume_from is not None:
        params, optim, ref, start = restore_checkpoint(load_checkpoint(resume_from), dcfg, comp.feats)
    else:
        params = init_params(cfg.seed, dcfg)
        if cfg.pretrain_iters:
            pretrain(params, data, cfg, comp.sched)
        ref = snapshot_reference(params)
        optim = {b: AdamState.zeros_like(params) for b in BRANCHES}
        start = 0

    runlog = RunLog()
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    it = start
    for it in range(start, end):
        if on_iteration is not None:
            on_iteration(it, params, ref)
        if cfg.eval_every and it % cfg.eval_every == 0:
            runlog.evals.append(_eval_record(it, params, ref, data, comp, cfg))
        for branch, family in _branch_plan(cfg, it):
            try:
                if branch == "forward":
                    rng = derive_rng(cfg.seed, _STREAM_FWD, it)
                    batch = data.paired_a.batch(cfg.batch_k, rng)
                    terms = forward_branch_step(params, batch, cfg, comp, optim["forward"], rng)
                else:
                    rng = derive_rng(cfg.seed, _STREAM_REV, it, 0 if family == "A" else 1)
                    source = data.unpaired_a if family == "A" else data.unpaired_b
                    batch = source.batch(cfg.batch_k, rng)
                    terms = reverse_branch_step(params, ref, batch, cfg, comp, optim["reverse"], rng)
            except dm.NonFiniteError as exc:
                raise TrainingError(f"iteration {it}, {branch} branch on family {family}: {exc}") from exc
            runlog.records.append({"iter": it, "branch": branch, "family": family, **terms})
        done = it + 1
        if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"ckpt_{done:06d}.bird", checkpoint_entries(params, optim, ref, comp.feats, done))
    final_iter = end if end > start else start
    if cfg.eval_every and final_iter == cfg.iterations:
        runlog.evals.append(_eval_record(final_iter, params, ref, data, comp, cfg))
    if out_dir is not None:
        save_checkpoint(out_dir / "final.bird", checkpoint_entries(params, optim, ref, comp.feats, final_iter))
        runlog.write(out_dir)
    return TrainResult(params, runlog, ref, optim, data, comp, time.perf_counter() - t_start, final_iter)


def _eval_record(it, params, ref, data, comp, cfg) -> dict:
    report = evaluate_params(params, data, comp, cfg)
    return {
        "iter": it,
        "reward_mean": report.mean("reward"),
        "struct_loss_mean": report.mean("struct_loss"),
        "psnr_mean": report.mean("psnr"),
        "ssim_mean": report.mean("ssim"),
        "sem_probe": sem_probe(params, ref, data, comp, cfg),
    }


def evaluate_params(params, data: TrainingData, comp: Components, cfg: TrainingConfig, label: str = "") -> EvalReport:
    return evaluate(
        params,
        data.eval_hr,
        data.eval_lr,
        comp.sched,
        comp.reward,
        comp.feats,
        seed=cfg.data_seed + 7,
        scale=cfg.scale,
        label=label or f"{cfg.variant}/gamma={cfg.gamma:g}/seed={cfg.seed}",
    )
