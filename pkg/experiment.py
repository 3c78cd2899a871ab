"""Experiment orchestration: train, evaluate and write the run report."""
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

import config as cfgmod
from diffusion_forcing import (
    dataset_array,
    drift_metric,
    make_toy_dataset,
    multi_seed_drift,
    train_df,
)
from flow_match import DenoiserParams, euler_sample, fm_train_step, train_denoiser, velocity_error_vs_closed_form
from io_utils import atomic_write_csv, atomic_write_text, save_checkpoint, save_reward
from preference_opt import (
    RewardParams,
    build_auto_pairs,
    dpo_stage_loop,
    ranking_accuracy,
    train_reward,
)
from runtime import CODE_VERSION, make_rng
from schedule_core import ad_schedule

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
LOSS_FILE = "loss.csv"
REPORT_FILE = "report.json"
CHECKPOINT_FILE = "model.dfck"
REWARD_FILE = "reward.dfrw"

# Step value that marks a final (non-series) metric in metrics.csv.
FINAL_STEP = -1


@dataclass
class RunReport:
    config_hash: str
    seed: int
    code_version: str = CODE_VERSION
    series: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def add_series(self, metric, operation, steps, values):
        self.series[metric] = {
            "operation": operation,
            "steps": [int(s) for s in steps],
            "values": [float(v) for v in values],
        }

    def add_final(self, metric, operation, value):
        self.final[metric] = {"operation": operation, "value": float(value)}

    def metrics_frame(self):
        rows = []
        for metric, s in self.series.items():
            rows += [{"step": st, "metric": metric, "value": v, "operation": s["operation"]}
                     for st, v in zip(s["steps"], s["values"])]
        rows += [{"step": FINAL_STEP, "metric": m, "value": f["value"], "operation": f["operation"]}
                 for m, f in self.final.items()]
        return pd.DataFrame(rows, columns=["step", "metric", "value", "operation"])

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def config_hash(cfg):
    payload = cfgmod.dumps(cfg) + f"\nseed={cfg.seed}\ncode={CODE_VERSION}"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_report(run_dir):
    path = Path(run_dir) / REPORT_FILE
    return RunReport.from_dict(json.loads(path.read_text(encoding="utf-8")))


# ------------------------------------------------------------
# Pipelines
# ------------------------------------------------------------

def _train_stage(cfg, report, data, rng):
    params = DenoiserParams.init(cfg.model, rng)
    if cfg.kind == "gaussian-toy":
        params, history = train_denoiser(
            params, data, cfg.train,
            step_fn=lambda p, o, b, c, r: fm_train_step(p, o, b, c, r, cfg.train))
        operation = "fm_loss"
    else:
        params, history = train_df(params, data, cfg.train, T=cfg.timesteps)
        operation = "df_train_step"
    params.meta["timesteps"] = cfg.timesteps
    report.add_series("train_loss", operation, history["step"], history["loss"])
    if len(history):
        report.add_final("train_loss", operation, history["loss"].iloc[-1])
    return params, history


def _evaluate_gaussian(cfg, report, params, rng):
    err = velocity_error_vs_closed_form(params, cfg.data.sigma1, cfg.data.frames, rng)
    report.add_final("velocity_rel_error", "closed_form_velocity_gaussian", err)
    plan = ad_schedule(cfg.data.frames, cfg.timesteps, 0)
    n = 1000
    x0 = rng.standard_normal((n, cfg.data.frames, cfg.data.dim))
    samples = euler_sample(params, plan, x0).reshape(-1, cfg.data.dim)
    cov = np.cov(samples, rowvar=False)
    target = cfg.data.sigma1 ** 2 * np.eye(cfg.data.dim)
    report.add_final("sample_cov_rel_error", "euler_sample",
                     np.linalg.norm(cov - target) / np.linalg.norm(target))


def _evaluate_rollout(cfg, report, params):
    seeds = [cfg.seed * 1000 + k for k in range(cfg.eval_seeds)]
    stabilised = multi_seed_drift(params, cfg.rollout, cfg.data, seeds, cond=None, T=cfg.timesteps)
    baseline_cfg = dataclasses.replace(cfg.rollout, history_noise_t=0.0)
    baseline = multi_seed_drift(params, baseline_cfg, cfg.data, seeds, cond=None, T=cfg.timesteps)
    drift = [r["drift"] for r in stabilised]
    base = [r["drift"] for r in baseline]
    report.add_series("rollout_drift", "drift_metric", range(len(drift)), drift)
    report.add_series("rollout_drift_baseline", "drift_metric", range(len(base)), base)
    report.add_final("drift_median", "drift_metric", np.median(drift))
    report.add_final("drift_median_baseline", "drift_metric", np.median(base))


def _reward_stage(cfg, report, dataset, out_dir):
    rng = make_rng(cfg.reward.seed)
    pairs = build_auto_pairs(dataset, rng)
    split = max(1, int(0.8 * len(pairs)))
    train, test = pairs[:split], pairs[split:] or pairs[:1]
    reward = RewardParams.init(cfg.data.dim, cfg.reward.hidden, rng,
                               cfg.reward.theta_tie, cfg.reward.learn_tie)
    reward, history = train_reward(reward, train, cfg.reward, rng)
    report.add_series("reward_loss", "btt_loss", history["step"], history["loss"])
    report.add_final("ranking_accuracy", "ranking_accuracy", ranking_accuracy(reward, test))
    save_reward(reward, out_dir / REWARD_FILE)
    return reward


def _dpo_stage(cfg, report, params, reward):
    if reward is None:
        def reward(seq):
            return -drift_metric(seq, cfg.data, cfg.rollout.window)
    _, steps, stages = dpo_stage_loop(params, cfg.dpo, reward, cfg.rollout,
                                      make_rng(cfg.dpo.seed), cfg.timesteps)
    losses = steps.dropna(subset=["loss"])
    report.add_series("dpo_loss", "dpo_loss", range(len(losses)), losses["loss"])
    report.add_series("dpo_reward_margin", "build_triplets", stages["stage"], stages["reward_margin"])
    report.add_series("dpo_margin_end", "implicit_margin", stages["stage"], stages["margin_end"])
    report.add_series("dpo_eval_reward", "sample_reward", stages["stage"], stages["eval_reward_end"])
    report.add_final("dpo_first_loss", "dpo_loss", stages["first_loss"].iloc[0])
    return stages


def run_experiment(cfg, dry_run=False):
    """Run the configured stages and write metrics.csv, loss.csv and report.json.

    With dry_run nothing is computed or written; the resolved config dict is
    returned instead of a RunReport.
    """
    if dry_run:
        return cfgmod.to_dict(cfg)
    started = time.perf_counter()
    out_dir = Path(cfg.out_dir)
    rng = make_rng(cfg.seed)
    report = RunReport(config_hash(cfg), cfg.seed)
    logger.info("Experiment %s (seed %d) -> %s", cfg.kind, cfg.seed, out_dir)

    dataset = make_toy_dataset(cfg.data, cfg.dataset_size, rng)
    data = dataset_array(dataset)
    params, history, reward = None, None, None
    if "train" in cfg.stages:
        params, history = _train_stage(cfg, report, data, rng)
    else:
        params = DenoiserParams.init(cfg.model, rng)
        params.meta["timesteps"] = cfg.timesteps
    if "evaluate" in cfg.stages:
        if cfg.kind == "gaussian-toy":
            _evaluate_gaussian(cfg, report, params, rng)
        else:
            _evaluate_rollout(cfg, report, params)
    if "reward" in cfg.stages:
        reward = _reward_stage(cfg, report, dataset, out_dir)
    if "dpo" in cfg.stages:
        _dpo_stage(cfg, report, params, reward)

    report.wall_clock = time.perf_counter() - started
    atomic_write_csv(report.metrics_frame(), out_dir / METRICS_FILE)
    if history is not None:
        atomic_write_csv(history, out_dir / LOSS_FILE)
    save_checkpoint(params, out_dir / CHECKPOINT_FILE, cfg.timesteps)
    atomic_write_text(out_dir / "config.json", cfgmod.dumps(cfg))
    atomic_write_text(out_dir / REPORT_FILE, json.dumps(report.to_dict(), indent=2, sort_keys=True))
    logger.info("Finished in %.1fs", report.wall_clock)
    return report
