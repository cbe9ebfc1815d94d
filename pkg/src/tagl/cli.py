"""Command-line interface: dataset generation, training, evaluation,
gradient verification, the ablation matrix, and ASPECTS scoring.

Exit codes: 0 success, 1 runtime/data failure, 2 usage error. Every command
writes a ``run.json`` into its output directory echoing the fully-resolved
configuration and the argv that produced it.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .aspects import LEVEL_BG, LEVEL_SG, INVOLVEMENT_RULES, aspects_score
from .gated import TaglConfig
from .gridmap import GridShape, ProbMap, ValidationError
from .losses import SegLossSpec
from .phantom import GenerationError, PhantomConfig, generate_dataset
from .trainer import (
    ABLATION_CONFIGS,
    ABLATION_EPOCHS,
    TrainConfig,
    TrainingDiverged,
    evaluate_cases,
    fit,
    run_ablation,
    validation_scores,
)
from .gradcheck import run_suites

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(Exception):
    pass


def _parse_shape(text: str) -> GridShape:
    try:
        if "x" in text:
            h, w = text.lower().split("x")
            return GridShape(int(h), int(w))
        side = int(text)
        return GridShape(side, side)
    except (ValueError, ValidationError):
        raise UsageError(f"--shape expects N or HxW with positive integers, got {text!r}")


def _unit(flag: str, value: float) -> float:
    if not (np.isfinite(value) and 0.0 <= value <= 1.0):
        raise UsageError(f"{flag} must lie in [0, 1], got {value}")
    return value


def _nonneg(flag: str, value: float) -> float:
    if not (np.isfinite(value) and value >= 0.0):
        raise UsageError(f"{flag} must be >= 0, got {value}")
    return value


def _positive_int(flag: str, value: int) -> int:
    if value < 1:
        raise UsageError(f"{flag} must be >= 1, got {value}")
    return value


def _onoff(flag: str, value: str) -> bool:
    if value not in ("on", "off"):
        raise UsageError(f"{flag} expects on|off, got {value!r}")
    return value == "on"


def _common_flags(p: argparse.ArgumentParser, out_dir: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
    if out_dir:
        p.add_argument("--out-dir", required=True, help="output directory (created if missing)")
    p.add_argument("--threads", type=int, default=1,
                   help="worker hint; results are identical for any value")
    p.add_argument("--format", choices=("json", "csv"), default="json",
                   help="report serialization format")


def _write_run_json(out_dir: Path, command: str, argv: list[str], config: dict) -> None:
    payload = {"command": command, "argv": list(argv), "config": config}
    fileio.write_json(payload, out_dir / "run.json")


def _prepare_out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tagl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_phantom = sub.add_parser("phantom", help="synthetic dataset commands")
    phantom_sub = p_phantom.add_subparsers(dest="phantom_command", required=True)
    p_gen = phantom_sub.add_parser("gen", help="generate a paired BG/SG dataset")
    _common_flags(p_gen)
    p_gen.add_argument("--shape", default="128", help="grid size N or HxW (default 128)")
    p_gen.add_argument("--n-train", type=int, default=400)
    p_gen.add_argument("--n-val", type=int, default=100)
    p_gen.add_argument("--n-test", type=int, default=100)
    p_gen.add_argument("--coupling-rho", type=float, default=0.8)
    p_gen.add_argument("--lesion-rate", type=float, default=0.25)
    p_gen.add_argument("--noise-sigma", type=float, default=0.02)
    p_gen.add_argument("--hypodensity-delta", type=float, default=0.08)

    p_train = sub.add_parser("train", help="train the toy predictor")
    _common_flags(p_train)
    p_train.add_argument("--dataset", required=True, help="dataset directory or manifest.json")
    p_train.add_argument("--tagl", default="on", help="on|off: include the gated coupling loss")
    p_train.add_argument("--lambda", dest="lam", type=float, default=1.0,
                         help="weight on the gated loss")
    p_train.add_argument("--tau", type=float, default=0.05, help="gate threshold")
    p_train.add_argument("--adaptive-weight", default="on", help="on|off: confidence weighting")
    p_train.add_argument("--detach-bg", default="off", help="on|off: no gradient into the BG map")
    p_train.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p_train.add_argument("--learning-rate", type=float, default=0.05)
    p_train.add_argument("--epochs", type=int, default=50)
    p_train.add_argument("--batch", type=int, default=8)
    p_train.add_argument("--seg-loss", choices=("ce", "ce_dice"), default="ce")
    p_train.add_argument("--dice-mix", type=float, default=0.5,
                         help="weight on the CE term of ce_dice")
    p_train.add_argument("--learn-cd-scale", default="off",
                         help="on|off: learn the contralateral channel scaling")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _common_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint directory or checkpoint.json")
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_eval.add_argument("--tau", type=float, default=0.05)
    p_eval.add_argument("--theta", type=float, default=0.5, help="involvement threshold")
    p_eval.add_argument("--rule", choices=INVOLVEMENT_RULES, default="mean-prob")
    p_eval.add_argument("--skip-absent-classes", action="store_true",
                        help="exclude absent classes from mean Dice/IoU")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _common_flags(p_grad)
    p_grad.add_argument("--sizes", "--size", type=int, nargs="+", default=[4, 8])
    p_grad.add_argument("--trials", type=int, default=200)
    p_grad.add_argument("--epsilon", type=float, default=1e-5)
    p_grad.add_argument("--tolerance", type=float, default=1e-5)
    p_grad.add_argument("--e2e-epsilon", type=float, default=1e-4)
    p_grad.add_argument("--e2e-tolerance", type=float, default=1e-4)

    p_abl = sub.add_parser("ablate", help="objective-variant comparison over seeds")
    _common_flags(p_abl)
    p_abl.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p_abl.add_argument("--configs", nargs="+", default=["ce", "ce_tagl", "ce_tagl_fixedq"],
                       help=f"subset of {ABLATION_CONFIGS}")
    p_abl.add_argument("--shape", default="128")
    p_abl.add_argument("--n-train", type=int, default=400)
    p_abl.add_argument("--n-val", type=int, default=100)
    p_abl.add_argument("--n-test", type=int, default=100)
    p_abl.add_argument("--coupling-rho", type=float, default=0.8)
    p_abl.add_argument("--lesion-rate", type=float, default=0.25)
    p_abl.add_argument("--noise-sigma", type=float, default=0.02)
    p_abl.add_argument("--hypodensity-delta", type=float, default=0.08)
    p_abl.add_argument("--epochs", type=int, default=ABLATION_EPOCHS)
    p_abl.add_argument("--learning-rate", type=float, default=0.05)
    p_abl.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p_abl.add_argument("--tau", type=float, default=0.05)
    p_abl.add_argument("--theta", type=float, default=0.5)

    p_score = sub.add_parser("score", help="ASPECTS score from prediction/atlas NGRID files")
    _common_flags(p_score)
    p_score.add_argument("--pred-bg", required=True, help="BG infarct probability NGRID")
    p_score.add_argument("--pred-sg", required=True, help="SG infarct probability NGRID")
    p_score.add_argument("--atlas-bg", required=True)
    p_score.add_argument("--atlas-sg", required=True)
    p_score.add_argument("--theta", type=float, default=0.5)
    p_score.add_argument("--rule", choices=INVOLVEMENT_RULES, default="mean-prob")
    return parser


def _phantom_config_from_args(args) -> PhantomConfig:
    return PhantomConfig(
        shape=_parse_shape(args.shape),
        coupling_rho=_unit("--coupling-rho", args.coupling_rho),
        lesion_rate=_unit("--lesion-rate", args.lesion_rate),
        noise_sigma=_nonneg("--noise-sigma", args.noise_sigma),
        hypodensity_delta=args.hypodensity_delta,
        seed=args.seed,
    )


def cmd_phantom_gen(args, argv) -> int:
    if not np.isfinite(args.hypodensity_delta):
        raise UsageError("--hypodensity-delta must be finite")
    cfg = _phantom_config_from_args(args)
    for flag in ("n_train", "n_val", "n_test"):
        if getattr(args, flag) < 0:
            raise UsageError(f"--{flag.replace('_', '-')} must be >= 0, got {getattr(args, flag)}")
    out = _prepare_out_dir(args)
    dataset = generate_dataset(cfg, args.n_train, args.n_val, args.n_test)
    fileio.save_dataset(dataset, out)
    _write_run_json(out, "phantom-gen", argv, {
        "phantom": fileio._phantom_config_dict(cfg),
        "n_train": args.n_train, "n_val": args.n_val, "n_test": args.n_test,
        "threads": args.threads,
    })
    print(f"wrote {args.n_train + args.n_val + args.n_test} cases to {out}")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    tagl_on = _onoff("--tagl", args.tagl)
    lam = _nonneg("--lambda", args.lam) if tagl_on else 0.0
    return TrainConfig(
        seg_loss=SegLossSpec(
            kind="CE" if args.seg_loss == "ce" else "CE_DICE",
            bce_dice_mix=_unit("--dice-mix", args.dice_mix),
        ),
        tagl=TaglConfig(
            tau=args.tau,
            lam=lam,
            adaptive_weight_enabled=_onoff("--adaptive-weight", args.adaptive_weight),
        ),
        epochs=_positive_int("--epochs", args.epochs),
        learning_rate=_nonneg("--learning-rate", args.learning_rate),
        optimizer=args.optimizer.upper(),
        batch=_positive_int("--batch", args.batch),
        seed=args.seed,
        detach_bg=_onoff("--detach-bg", args.detach_bg),
        learn_cd_scale=_onoff("--learn-cd-scale", args.learn_cd_scale),
    )


def _train_config_echo(cfg: TrainConfig) -> dict:
    return {
        "seg_loss": {"kind": cfg.seg_loss.kind, "dice_smoothing": cfg.seg_loss.dice_smoothing,
                     "bce_dice_mix": cfg.seg_loss.bce_dice_mix},
        "tagl": {"tau": cfg.tagl.tau, "lambda": cfg.tagl.lam,
                 "adaptive_weight_enabled": cfg.tagl.adaptive_weight_enabled},
        "epochs": cfg.epochs, "learning_rate": cfg.learning_rate,
        "optimizer": cfg.optimizer, "batch": cfg.batch, "seed": cfg.seed,
        "detach_bg": cfg.detach_bg, "learn_cd_scale": cfg.learn_cd_scale,
    }


def cmd_train(args, argv) -> int:
    if not (0.0 <= args.tau < 1.0):
        raise UsageError(f"--tau must lie in [0, 1), got {args.tau}")
    cfg = _train_config_from_args(args)
    out = _prepare_out_dir(args)
    dataset = fileio.load_dataset(args.dataset)
    best, history = fit(cfg, dataset)
    fileio.save_checkpoint(best, _train_config_echo(cfg), out)
    fileio.write_history_csv(history, out / "history.csv")
    _write_run_json(out, "train", argv, {
        "dataset": str(args.dataset), "train": _train_config_echo(cfg), "threads": args.threads,
    })
    print(f"best epoch {best.epoch}: val soft Dice {best.val_mean_dice:.6f}, "
          f"val consistency {best.val_consistency:.6f}")
    return 0


def cmd_eval(args, argv) -> int:
    if not (0.0 < args.theta < 1.0):
        raise UsageError(f"--theta must lie in (0, 1), got {args.theta}")
    if not (0.0 <= args.tau < 1.0):
        raise UsageError(f"--tau must lie in [0, 1), got {args.tau}")
    out = _prepare_out_dir(args)
    record = fileio.load_checkpoint(args.checkpoint)
    dataset = fileio.load_dataset(args.dataset)
    cases = dataset.split(args.split)
    if not cases:
        raise UsageError(f"split {args.split!r} is empty")
    per_case, summary = evaluate_cases(
        record.head, cases, args.tau, args.theta, args.rule, args.skip_absent_classes
    )
    soft_dice, _ = validation_scores(record.head, cases, args.tau)
    fileio.write_eval_cases_csv(per_case, out / "eval_cases.csv")
    payload = {
        "split": args.split, "n_cases": summary.n_cases,
        "mean_dice": summary.mean_dice, "mean_iou": summary.mean_iou,
        "mean_soft_dice": soft_dice,
        "consistency": summary.consistency, "aspects_mae": summary.aspects_mae,
        "checkpoint_epoch": record.epoch,
        "checkpoint_val_mean_dice": record.val_mean_dice,
    }
    if args.format == "json":
        rounded = fileio._round6(payload)
        rounded["mean_soft_dice"] = soft_dice
        rounded["checkpoint_val_mean_dice"] = record.val_mean_dice
        fileio.write_json(rounded, out / "eval_summary.json")
    else:
        cols = ["split", "n_cases", "mean_dice", "mean_iou", "consistency", "aspects_mae"]
        fileio.write_csv([{k: payload[k] for k in cols}], cols, out / "eval_summary.csv")
    _write_run_json(out, "eval", argv, {
        "checkpoint": str(args.checkpoint), "dataset": str(args.dataset),
        "split": args.split, "tau": args.tau, "theta": args.theta, "rule": args.rule,
        "skip_absent_classes": args.skip_absent_classes,
        "format": args.format, "threads": args.threads,
    })
    print(f"{args.split}: mean Dice {summary.mean_dice:.6f}, mean IoU {summary.mean_iou:.6f}, "
          f"consistency {summary.consistency:.6f}, ASPECTS MAE {summary.aspects_mae:.6f}")
    return 0


def cmd_gradcheck(args, argv) -> int:
    for flag, v in (("--trials", args.trials),):
        _positive_int(flag, v)
    if args.epsilon <= 0 or args.tolerance <= 0:
        raise UsageError("--epsilon and --tolerance must be positive")
    out = _prepare_out_dir(args)
    results = run_suites(
        sizes=tuple(args.sizes), trials=args.trials, eps=args.epsilon,
        tolerance=args.tolerance, seed=args.seed,
        end_to_end_eps=args.e2e_epsilon, end_to_end_tolerance=args.e2e_tolerance,
    )
    rows = [
        {"suite": r.suite, "trials": r.trials, "worst_rel_err": r.worst_rel_err,
         "tolerance": r.tolerance, "passed": r.passed}
        for r in results
    ]
    fileio.write_json({"suites": rows}, out / "gradcheck.json")
    _write_run_json(out, "gradcheck", argv, {
        "sizes": list(args.sizes), "trials": args.trials, "epsilon": args.epsilon,
        "tolerance": args.tolerance, "e2e_epsilon": args.e2e_epsilon,
        "e2e_tolerance": args.e2e_tolerance, "seed": args.seed, "threads": args.threads,
    })
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.suite}: worst relative error {r.worst_rel_err:.3e} "
              f"(tolerance {r.tolerance:.0e}, {r.trials} trials)")
        ok = ok and r.passed
    return 0 if ok else 1


def cmd_ablate(args, argv) -> int:
    if not args.seeds:
        raise UsageError("--seeds needs at least one seed")
    for name in args.configs:
        if name not in ABLATION_CONFIGS:
            raise UsageError(f"--configs: unknown config {name!r}, expected subset of {ABLATION_CONFIGS}")
    pcfg = PhantomConfig(
        shape=_parse_shape(args.shape),
        coupling_rho=_unit("--coupling-rho", args.coupling_rho),
        lesion_rate=_unit("--lesion-rate", args.lesion_rate),
        noise_sigma=_nonneg("--noise-sigma", args.noise_sigma),
        hypodensity_delta=args.hypodensity_delta,
        seed=0,
    )
    if not (0.0 <= args.tau < 1.0):
        raise UsageError(f"--tau must lie in [0, 1), got {args.tau}")
    base = TrainConfig(
        epochs=_positive_int("--epochs", args.epochs),
        learning_rate=_nonneg("--learning-rate", args.learning_rate),
        tagl=TaglConfig(tau=args.tau, lam=_nonneg("--lambda", args.lam)),
        n_train=_positive_int("--n-train", args.n_train),
        n_val=_positive_int("--n-val", args.n_val),
        n_test=_positive_int("--n-test", args.n_test),
    )
    out = _prepare_out_dir(args)
    rows = run_ablation(args.configs, args.seeds, pcfg, base, _unit("--theta", args.theta))
    fileio.write_ablation_csv(rows, out / "ablation.csv")

    means = {
        name: float(np.mean([r["mean_dice"] for r in rows if r["config"] == name]))
        for name in args.configs
    }
    summary = {"seeds": list(args.seeds), "mean_dice_by_config": fileio._round6(means)}
    if "ce" in means and "ce_tagl" in means:
        delta = means["ce_tagl"] - means["ce"]
        summary["dice_delta_ce_tagl_minus_ce"] = round(delta, 6)
        print(f"mean test Dice delta (ce_tagl - ce): {delta:+.6f}")
    fileio.write_json(summary, out / "ablation_summary.json")
    _write_run_json(out, "ablate", argv, {
        "phantom": fileio._phantom_config_dict(pcfg), "seeds": list(args.seeds),
        "configs": list(args.configs), "epochs": base.epochs,
        "learning_rate": base.learning_rate, "lambda": base.tagl.lam, "tau": base.tagl.tau,
        "theta": args.theta, "n_train": base.n_train, "n_val": base.n_val,
        "n_test": base.n_test, "threads": args.threads,
    })
    for r in rows:
        print(f"{r['config']:16s} seed={r['seed']} dice={r['mean_dice']:.6f} "
              f"iou={r['mean_iou']:.6f} consistency={r['consistency']:.6f} "
              f"aspects_mae={r['aspects_mae']:.6f}")
    return 0


def cmd_score(args, argv) -> int:
    if not (0.0 < args.theta < 1.0):
        raise UsageError(f"--theta must lie in (0, 1), got {args.theta}")
    out = _prepare_out_dir(args)
    pred_bg = ProbMap.from_array(np.asarray(fileio.read_ngrid(args.pred_bg), dtype=np.float64))
    pred_sg = ProbMap.from_array(np.asarray(fileio.read_ngrid(args.pred_sg), dtype=np.float64))
    atlas_bg = fileio.read_atlas(args.atlas_bg, LEVEL_BG)
    atlas_sg = fileio.read_atlas(args.atlas_sg, LEVEL_SG)
    result = aspects_score((pred_bg, atlas_bg), (pred_sg, atlas_sg), args.theta, args.rule)
    ext = "json" if args.format == "json" else "csv"
    fileio.write_report(result, out / f"aspects.{ext}", args.format)
    _write_run_json(out, "score", argv, {
        "pred_bg": str(args.pred_bg), "pred_sg": str(args.pred_sg),
        "atlas_bg": str(args.atlas_bg), "atlas_sg": str(args.atlas_sg),
        "theta": args.theta, "rule": args.rule, "format": args.format,
        "threads": args.threads,
    })
    print(f"ASPECTS score: {result.score} "
          f"(involved: {', '.join(str(i) for i in sorted(result.involved)) or 'none'})")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        if args.threads < 1:
            raise UsageError(f"--threads must be >= 1, got {args.threads}")
        if not (0 <= args.seed < 2**64):
            raise UsageError(f"--seed must be a 64-bit unsigned integer, got {args.seed}")
        if args.command == "phantom":
            return cmd_phantom_gen(args, argv)
        if args.command == "train":
            return cmd_train(args, argv)
        if args.command == "eval":
            return cmd_eval(args, argv)
        if args.command == "gradcheck":
            return cmd_gradcheck(args, argv)
        if args.command == "ablate":
            return cmd_ablate(args, argv)
        if args.command == "score":
            return cmd_score(args, argv)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (ValidationError, fileio.ManifestError, fileio.NgridError,
            GenerationError, TrainingDiverged, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
