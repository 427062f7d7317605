"""Command-line entry point: gen-data, degrade, train, eval, analyze, sample."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import analyze_corpora
from .degrade import degrade_corpus, family_a, family_b, gen_corpus
from .denoiser import DenoiserConfig, init_params, param_names, params_from_arrays
from .diffusion import sample
from .evalmetrics import EvalReport, evaluate
from .features import FrozenFeatures
from .formats import (
    FormatError,
    image_grid,
    load_checkpoint,
    parse_config_text,
    read_image,
    read_tensor,
    write_csv,
    write_image,
    write_json,
    write_tensor,
)
from .schedule import make_schedule
from .trainer import Components, TrainingConfig, TrainingError, build_data, train

log = logging.getLogger("birdsr")


# --------------------------------------------------------------------------
# image directories
# --------------------------------------------------------------------------


def read_dir(path) -> tuple[list[str], list[np.ndarray]]:
    """Images of a directory sorted by stem; a ``.ft`` sidecar wins over the quantized PGM/PPM."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"not a directory: {path}")
    stems: dict[str, Path] = {}
    for f in sorted(path.iterdir()):
        if f.suffix in (".pgm", ".ppm") and f.stem not in stems:
            stems[f.stem] = f
        elif f.suffix == ".ft":
            stems[f.stem] = f
    if not stems:
        raise FileNotFoundError(f"no images in {path}")
    names = sorted(stems)
    imgs = [read_tensor(stems[n]) if stems[n].suffix == ".ft" else read_image(stems[n]) for n in names]
    return names, imgs


def write_dir(path, names, imgs, sidecar: bool = True) -> None:
    path = Path(path)
    for name, img in zip(names, imgs):
        write_image(path / f"{name}.pgm", img)
        if sidecar:
            write_tensor(path / f"{name}.ft", img)


# --------------------------------------------------------------------------
# config / checkpoint helpers
# --------------------------------------------------------------------------


def load_config(path, overrides: dict[str, str] | None = None) -> TrainingConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainingConfig.from_strings(values)


def config_for_checkpoint(ckpt, config_path=None) -> TrainingConfig:
    if config_path:
        return load_config(config_path)
    manifest = Path(ckpt).parent / "manifest.json"
    if manifest.exists():
        return TrainingConfig(**json.loads(manifest.read_text())["config"])
    return TrainingConfig()


def params_for(cfg: TrainingConfig, ckpt=None):
    dcfg = DenoiserConfig(hidden_width=cfg.hidden_width, embed_dim=cfg.hidden_width, dtype=cfg.dtype)
    if ckpt is None:
        return init_params(cfg.seed, dcfg)
    entries = load_checkpoint(ckpt)
    try:
        return params_from_arrays({n: entries[f"param.{n}"] for n in param_names()}, dcfg)
    except KeyError as exc:
        raise FormatError(f"checkpoint missing entry {exc}") from None


def _overrides(args) -> dict[str, str]:
    keys = {"variant": "variant", "gamma": "gamma", "seed": "seed", "iters": "iterations"}
    return {dst: None if getattr(args, src) is None else str(getattr(args, src)) for src, dst in keys.items()}


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    corpus = gen_corpus(args.n, args.size, args.seed, scale=args.scale)
    write_dir(args.out, [f"img_{i:04d}" for i in range(len(corpus))], corpus, sidecar=not args.no_sidecar)
    print(f"wrote {len(corpus)} images to {args.out}")
    return 0


def cmd_degrade(args) -> int:
    names, imgs = read_dir(args.input)
    make = family_a if args.family == "a" else family_b
    lr = degrade_corpus(imgs, make(seed=args.seed, scale=args.scale))
    write_dir(args.out, names, lr, sidecar=not args.no_sidecar)
    print(f"degraded {len(names)} images (family {args.family.upper()}) into {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if args.checkpoint_every is not None:
        cfg = cfg.replace(checkpoint_every=args.checkpoint_every)
    res = train(cfg, out_dir=args.out, resume_from=args.resume)
    report = _evaluate_cfg(cfg, res.params)
    write_csv(Path(args.out) / "eval.csv", report.rows, list(EvalReport.COLUMNS))
    _print_summary(report)
    print(f"trained {cfg.variant} for {cfg.iterations} iterations in {res.wall_clock:.1f}s; outputs in {args.out}")
    return 0


def _evaluate_cfg(cfg: TrainingConfig, params, hr=None, lr=None) -> EvalReport:
    comp = Components.from_config(cfg)
    if hr is None:
        data = build_data(cfg)
        hr, lr = data.eval_hr, data.eval_lr
    return evaluate(
        params,
        hr,
        lr,
        comp.sched,
        comp.reward,
        comp.feats,
        seed=cfg.data_seed + 7,
        scale=cfg.scale,
        label=f"{cfg.variant}/gamma={cfg.gamma:g}/seed={cfg.seed}",
    )


def _print_summary(report: EvalReport) -> None:
    s = report.summary()
    print(f"{'label':<32} {'n':>3} {'psnr':>8} {'ssim':>7} {'struct':>8} {'reward':>7}")
    print(
        f"{s['label']:<32} {s['n']:>3} {s['psnr_mean']:>8.3f} {s['ssim_mean']:>7.4f} "
        f"{s['struct_loss_mean']:>8.5f} {s['reward_mean']:>7.4f}"
    )


def cmd_eval(args) -> int:
    if args.checkpoint:
        cfg = config_for_checkpoint(args.checkpoint, args.config)
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    params = params_for(cfg, args.checkpoint)
    hr = lr = None
    if args.hr_dir or args.lr_dir:
        if not (args.hr_dir and args.lr_dir):
            raise ValueError("--hr-dir and --lr-dir must be given together")
        hr, lr = np.stack(read_dir(args.hr_dir)[1]), np.stack(read_dir(args.lr_dir)[1])
    report = _evaluate_cfg(cfg, params, hr, lr)
    write_csv(args.out, report.rows, list(EvalReport.COLUMNS))
    _print_summary(report)
    return 0


def cmd_analyze(args) -> int:
    _, a = read_dir(args.corpus_a)
    _, b = read_dir(args.corpus_b)
    hr = read_dir(args.hr)[1] if args.hr else None
    summary = analyze_corpora(a, b, args.out, hr=hr)
    write_json(Path(args.out) / "summary.json", summary)
    for k, v in summary.items():
        print(f"{k:<24} {v:.6f}")
    return 0


def cmd_sample(args) -> int:
    cfg = config_for_checkpoint(args.checkpoint, args.config) if args.checkpoint else load_config(args.config)
    params = params_for(cfg, args.checkpoint)
    names, lr = read_dir(args.lr_dir)
    sched = make_schedule(cfg.schedule_variant, cfg.T, cfg.kappa)
    sr, trace = sample(params, np.stack(lr), sched, args.seed, scale=cfg.scale)
    sr = np.clip(sr, 0.0, 1.0)
    out = Path(args.out)
    write_dir(out, [f"{n}_sr" for n in names], sr, sidecar=not args.no_sidecar)
    if args.trace:
        snaps = trace.x0_snapshots()  # (T+1, N, C, H, W)
        for i, name in enumerate(names):
            write_image(out / "trace" / f"{name}.pgm", image_grid(list(snaps[:, i]), cols=len(snaps)))
    print(f"wrote {len(names)} SR images to {out}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="birdsr", description="Reward-guided diffusion super-resolution at desk scale.")
    p.add_argument("--version", action="version", version=f"birdsr {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic HR corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--scale", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-sidecar", action="store_true", help="skip lossless .ft files")
    g.set_defaults(func=cmd_gen_data)

    d = sub.add_parser("degrade", help="apply a degradation family to a directory")
    d.add_argument("--family", choices=("a", "b"), required=True)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--scale", type=int, default=4)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--no-sidecar", action="store_true")
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", help="run fine-tuning from a config file")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=("forward_only", "reverse_only", "all_reverse", "mixed"))
    t.add_argument("--gamma", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or a fresh init) on held-out family-B pairs")
    e.add_argument("--checkpoint")
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--hr-dir")
    e.add_argument("--lr-dir")
    e.add_argument("--out", required=True, help="CSV path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="distribution-shift diagnostics over two LR corpora")
    a.add_argument("--corpus-a", required=True)
    a.add_argument("--corpus-b", required=True)
    a.add_argument("--hr", help="HR directory paired by file stem order")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sample", help="super-resolve a directory of LR images")
    s.add_argument("--checkpoint")
    s.add_argument("--config")
    s.add_argument("--lr-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trace", action="store_true", help="also write per-step x0 grids under OUT/trace")
    s.add_argument("--no-sidecar", action="store_true")
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FormatError, ValueError, KeyError, OSError, TrainingError) as exc:
        print(f"birdsr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
