"""dforce command line.

    python cli.py schedule count --frames 16 --timesteps 1000
    python cli.py --config exp.json run
    python cli.py crop --pbm mask.pbm
"""
import argparse
import dataclasses
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd

import config as cfgmod
from data_pipeline import CropConfig, bucket_manifest, build_mask, crop_verdict, max_interior_rectangle
from diffusion_forcing import (
    condition_on_first_frame,
    dataset_array,
    drift_metric,
    make_toy_dataset,
    rollout,
    segment_drift,
    train_df,
)
from errors import DForceError, DomainError
from experiment import CHECKPOINT_FILE, LOSS_FILE, REWARD_FILE, load_report, run_experiment
from flow_match import DenoiserParams, euler_sample
from io_utils import (
    atomic_write_csv,
    atomic_write_text,
    emit_frames,
    load_checkpoint,
    load_reward,
    read_frames_csv,
    read_pbm,
    save_checkpoint,
    save_reward,
)
from preference_opt import (
    RewardParams,
    build_auto_pairs,
    dpo_stage_loop,
    ranking_accuracy,
    save_pairs,
    score_manual,
    train_reward,
)
from report_pdf import write_report_pdf
from runtime import make_rng, setup_logging
from schedule_core import (
    ad_schedule,
    count_nondecreasing,
    count_unconstrained,
    fopp_sample_batch,
    plan_matrix,
)

logger = logging.getLogger("dforce")


RATIO_DIGITS = 30
DRY_RUN_COMMANDS = ("train", "rollout", "reward-train", "dpo", "run")


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def decimal_string(value, digits=RATIO_DIGITS):
    """Decimal expansion of a non-negative Fraction using integer arithmetic only.

    Terminating fractions are written in full; anything else is truncated
    after `digits` places. Returns (text, exact).
    """
    num, den = value.numerator, value.denominator
    rest, places = den, 0
    for p in (2, 5):
        k = 0
        while rest % p == 0:
            rest //= p
            k += 1
        places = max(places, k)
    exact = rest == 1 and places <= digits
    if rest == 1:
        places = min(places, digits)
    else:
        places = digits
    whole = num * 10 ** places // den
    text = str(whole)
    if places:
        text = text.rjust(places + 1, "0")
        text = f"{text[:-places]}.{text[-places:]}"
    return text, exact


def resolve_config(args):
    if args.config:
        cfg = cfgmod.load_config(args.config)
    else:
        cfg = cfgmod.ExperimentConfig(kind=args.kind, seed=0 if args.seed is None else args.seed)
    return cfgmod.with_overrides(cfg, seed=args.seed, out_dir=args.out)


def _out_dir(args, cfg=None):
    if args.out:
        return Path(args.out)
    return Path(cfg.out_dir) if cfg is not None else Path(".")


# ------------------------------------------------------------
# Subcommands
# ------------------------------------------------------------

def cmd_schedule(args):
    if args.action == "count":
        total = count_unconstrained(args.F, args.T)
        constrained = count_nondecreasing(args.F, args.T)
        ratio, exact = decimal_string(Fraction(total, constrained))
        _print_json({
            "F": args.F, "T": args.T,
            "unconstrained": str(total),
            "nondecreasing": str(constrained),
            "nondecreasing_digits": len(str(constrained)),
            "orders_of_magnitude_saved": len(str(total)) - len(str(constrained)),
            "ratio": ratio,
            "ratio_exact": exact,
        })
        return 0
    if args.action == "sample":
        rng = make_rng(args.seed if args.seed is not None else 0)
        rows = fopp_sample_batch(args.F, args.T, args.n, rng)
        if not args.csv:
            for row in rows:
                print(json.dumps([int(v) for v in row]))
            return 0
        df = pd.DataFrame(rows, columns=[f"t{k + 1}" for k in range(args.F)])
    else:
        if args.s is None:
            raise DomainError("schedule ad needs --diff")
        df = pd.DataFrame(plan_matrix(ad_schedule(args.F, args.T, args.s), include_initial=True),
                          columns=[f"t{k + 1}" for k in range(args.F)])
        df.insert(0, "step", np.arange(len(df)))
    if args.csv:
        atomic_write_csv(df, args.csv)
        print(f"Wrote {len(df)} rows to {args.csv}")
    else:
        sys.stdout.write(df.to_csv(index=False, lineterminator="\n"))
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    if args.dry_run:
        print(cfgmod.dumps(cfg))
        return 0
    rng = make_rng(cfg.seed)
    data = dataset_array(make_toy_dataset(cfg.data, cfg.dataset_size, rng))
    params = DenoiserParams.init(cfg.model, rng)
    params, history = train_df(params, data, cfg.train, T=cfg.timesteps, progress=args.progress)
    out = _out_dir(args, cfg)
    save_checkpoint(params, out / CHECKPOINT_FILE, cfg.timesteps)
    atomic_write_csv(history, out / LOSS_FILE)
    _print_json({"checkpoint": out / CHECKPOINT_FILE, "final_loss": float(history["loss"].iloc[-1])})
    return 0


def cmd_sample(args):
    params, T = load_checkpoint(args.checkpoint)
    rng = make_rng(args.seed if args.seed is not None else 0)
    F = args.frames or params.max_frames
    plan = ad_schedule(F, T, args.s if args.s is not None else 0)
    out = _out_dir(args)
    written = []
    for k in range(args.n):
        seq = euler_sample(params, plan, rng.standard_normal((F, params.dim)), args.prompt)
        written += emit_frames(seq, args.format, out / f"sample_{k:03d}")
    _print_json({"files": len(written), "out": out})
    return 0


def cmd_rollout(args):
    cfg = resolve_config(args)
    overrides = {name: value for name, value in (
        ("f_prev", args.f_prev), ("f_new", args.f_new), ("total_frames", args.total_frames),
        ("history_noise_t", args.history_noise), ("s", args.s)) if value is not None}
    if overrides:
        cfg.rollout = dataclasses.replace(cfg.rollout, **overrides)
    if args.dry_run:
        print(cfgmod.dumps(cfg))
        return 0
    params, T = load_checkpoint(args.checkpoint)
    rng = make_rng(cfg.seed)
    if args.first_frame:
        first = read_frames_csv(args.first_frame).frames[0]
        seq = condition_on_first_frame(params, first, cfg.rollout, rng, T, cond=args.prompt)
    else:
        seq = rollout(params, cfg.rollout, args.prompt, rng, T)
    out = _out_dir(args, cfg)
    emit_frames(seq, args.format, out, prefix="rollout")
    report = {
        "frames": seq.F,
        "seed": cfg.seed,
        "rollout": dataclasses.asdict(cfg.rollout),
        "drift": drift_metric(seq, cfg.data, cfg.rollout.window),
        "segments": segment_drift(seq, cfg.data, cfg.rollout),
    }
    atomic_write_text(out / "rollout_report.json", json.dumps(report, indent=2, sort_keys=True))
    _print_json({"frames": seq.F, "drift": report["drift"]})
    return 0


def cmd_reward_train(args):
    cfg = resolve_config(args)
    if args.dry_run:
        print(cfgmod.dumps(cfg))
        return 0
    rng = make_rng(cfg.reward.seed)
    spec = cfg.data
    train_set = make_toy_dataset(spec, cfg.reward.n_train, rng)
    test_set = make_toy_dataset(spec, cfg.reward.n_test, rng)
    train_pairs = build_auto_pairs(train_set, rng)
    test_pairs = build_auto_pairs(test_set, rng)
    out = _out_dir(args, cfg)
    if args.save_pairs:
        save_pairs(test_pairs, out / "pairs")
    reward = RewardParams.init(spec.dim, cfg.reward.hidden, rng, cfg.reward.theta_tie, cfg.reward.learn_tie)
    reward, history = train_reward(reward, train_pairs, cfg.reward, rng, progress=args.progress)
    save_reward(reward, out / REWARD_FILE)
    atomic_write_csv(history, out / "reward_loss.csv")
    _print_json({
        "final_loss": float(history["loss"].iloc[-1]),
        "ranking_accuracy": ranking_accuracy(reward, test_pairs),
        "theta_tie": reward.theta_tie,
    })
    return 0


def cmd_dpo(args):
    cfg = resolve_config(args)
    if args.dry_run:
        print(cfgmod.dumps(cfg))
        return 0
    params, T = load_checkpoint(args.checkpoint)
    if args.reward:
        reward = load_reward(args.reward)
    else:
        def reward(seq):
            return -drift_metric(seq, cfg.data, cfg.rollout.window)
    params, steps, stages = dpo_stage_loop(params, cfg.dpo, reward, cfg.rollout,
                                           make_rng(cfg.dpo.seed), T, progress=args.progress)
    out = _out_dir(args, cfg)
    save_checkpoint(params, out / "dpo.dfck", T)
    atomic_write_csv(steps, out / "dpo_steps.csv")
    atomic_write_csv(stages, out / "dpo_stages.csv")
    for row in stages.to_dict(orient="records"):
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_crop(args):
    crop_cfg = CropConfig(area_threshold=args.area_threshold, ar_tolerance=args.ar_tolerance)
    if args.pbm:
        mask = read_pbm(args.pbm)
    elif args.detections:
        spec = json.loads(Path(args.detections).read_text(encoding="utf-8"))
        try:
            mask = build_mask(int(spec["width"]), int(spec["height"]), spec.get("boxes", []))
        except (KeyError, TypeError) as exc:
            raise DomainError(f"{args.detections}: expected width, height and boxes ({exc})") from exc
    else:
        raise DomainError("crop needs --pbm or --detections")
    height, width = mask.shape
    rect, _ = max_interior_rectangle(mask)
    verdict = crop_verdict(rect, width, height, crop_cfg)
    _print_json(verdict)
    print("ACCEPT" if verdict["accepted"] else "REJECT: " + "; ".join(verdict["reasons"]))
    return 0


def cmd_bucket(args):
    cfg = resolve_config(args)
    manifest = pd.read_csv(args.manifest)
    out = bucket_manifest(manifest, cfg.buckets)
    atomic_write_csv(out, args.output)
    print(f"Bucketed {len(out)} of {len(manifest)} clips into {args.output}")
    return 0


def cmd_report(args):
    report = load_report(args.run_dir)
    path = write_report_pdf(report, args.run_dir)
    for metric, f in sorted(report.final.items()):
        print(f"{metric:28s} {f['value']:>14.6g}  ({f['operation']})")
    print(f"Report: {path}")
    return 0


def cmd_score_manual(args):
    counts = {}
    for item in args.counts:
        key, _, value = item.partition("=")
        if not value.isdigit():
            raise DomainError(f"expected failure=count, got {item!r}")
        counts[key] = int(value)
    _print_json({"score": score_manual(counts), "counts": counts})
    return 0


def cmd_run(args):
    cfg = resolve_config(args)
    if args.dry_run:
        print(cfgmod.dumps(cfg))
        return 0
    report = run_experiment(cfg)
    _print_json({"out_dir": cfg.out_dir, "config_hash": report.config_hash,
                 "final": {k: v["value"] for k, v in report.final.items()}})
    return 0


# ------------------------------------------------------------
# Parser
# ------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="dforce", description="Desk-scale diffusion forcing toolkit")
    parser.add_argument("--config", help="experiment JSON file")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--dry-run", action="store_true", help="print the resolved config and stop")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--kind", default="blob", choices=cfgmod.EXPERIMENT_KINDS,
                        help="experiment kind when no --config is given")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="count, sample or plan timestep schedules")
    p.add_argument("action", choices=("count", "sample", "ad"))
    p.add_argument("--frames", "-F", dest="F", type=int, required=True)
    p.add_argument("--timesteps", "-T", dest="T", type=int, required=True)
    p.add_argument("--diff", dest="s", type=int, help="adaptive difference s for the AD plan")
    p.add_argument("--samples", dest="n", type=int, default=10)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("train", help="diffusion-forcing training on the toy dataset")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample clips from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--frames", type=int)
    p.add_argument("--s", type=int)
    p.add_argument("--prompt", type=int)
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("rollout", help="sliding-window long rollout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--f-prev", type=int, help="history frames kept from the previous window")
    p.add_argument("--f-new", type=int, help="frames generated per window")
    p.add_argument("--total-frames", type=int)
    p.add_argument("--history-noise", type=float, help="noise level marking the history frames")
    p.add_argument("--diff", dest="s", type=int, help="adaptive difference s")
    p.add_argument("--first-frame", help="CSV whose first frame conditions the rollout")
    p.add_argument("--prompt", type=int)
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("reward-train", help="train the BTT reward on synthetic distortion pairs")
    p.add_argument("--save-pairs", action="store_true")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_reward_train)

    p = sub.add_parser("dpo", help="staged Flow-DPO fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reward", help="reward model file; defaults to the drift oracle")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_dpo)

    p = sub.add_parser("crop", help="largest clean crop of a subtitle/logo mask")
    p.add_argument("--pbm")
    p.add_argument("--detections", help="JSON with width, height and boxes")
    p.add_argument("--area-threshold", type=float, default=0.8)
    p.add_argument("--ar-tolerance", type=float, default=0.1)
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("bucket", help="assign target fps and buckets to a clip manifest")
    p.add_argument("manifest")
    p.add_argument("output")
    p.set_defaults(func=cmd_bucket)

    p = sub.add_parser("report", help="render report.pdf for a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("score-manual", help="weighted motion-quality score")
    p.add_argument("counts", nargs="*", help="failure=count pairs")
    p.set_defaults(func=cmd_score_manual)

    p = sub.add_parser("run", help="run a full experiment from the config")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        if args.dry_run and args.command not in DRY_RUN_COMMANDS:
            raise DomainError(f"--dry-run is not supported by {args.command}; "
                              f"it applies to {', '.join(DRY_RUN_COMMANDS)}")
        return args.func(args)
    except DForceError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
