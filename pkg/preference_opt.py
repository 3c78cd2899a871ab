"""Preference optimisation: BTT reward model, Flow-DPO and the DMD gradient."""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit, log_expit
from tqdm import tqdm

from diffusion_forcing import rollout
from errors import DomainError, NonFiniteError
from flow_match import LatentSequence, RMSProp, backward, forward, interpolate
from io_utils import atomic_write_text, read_frames_csv, write_frames_csv
from runtime import parallel_map, spawn_rngs
from schedule_core import fopp_sample

logger = logging.getLogger(__name__)

A_BETTER = "a_better"
B_BETTER = "b_better"
TIE = "tie"
LABELS = (A_BETTER, B_BETTER, TIE)

DISTORTION_KINDS = ("reverse", "resample_fast", "resample_slow", "jitter", "noise_inject")

# Points per observed instance when annotators score motion quality by hand.
MOTION_QUALITY_WEIGHTS = {
    "insufficient_motion_amplitude": 1,
    "excessive_motion_amplitude": 2,
    "subject_distortion": 3,
    "local_detail_distortion": 1,
    "basic_physics_violation": 3,
    "interaction_violation": 2,
    "unnatural_motion": 1,
}

REWARD_PARAM_NAMES = ("w1", "b1", "w2", "b2", "phi")


# ------------------------------------------------------------
# Types
# ------------------------------------------------------------

@dataclass(eq=False)
class PreferencePair:
    sample_a: LatentSequence
    sample_b: LatentSequence
    label: str
    kind: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise DomainError(f"unknown label {self.label!r}")
        if self.sample_a.frames.shape != self.sample_b.frames.shape:
            raise DomainError("pair members must share (F, D)")


@dataclass(eq=False)
class Triplet:
    chosen: LatentSequence
    rejected: LatentSequence
    prompt: int = 0

    def __post_init__(self):
        if self.chosen.frames.shape != self.rejected.frames.shape:
            raise DomainError("chosen and rejected must share (F, D)")
        if np.array_equal(self.chosen.frames, self.rejected.frames):
            raise DomainError("chosen and rejected must differ in at least one frame")


@dataclass
class DPOConfig:
    beta: float = 5.0
    refresh_interval: int = 200
    stage_count: int = 3
    learning_rate: float = 1e-4
    batch_size: int = 8
    samples_per_prompt: int = 8
    n_prompts: int = 4
    independent_draws: bool = False
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.beta <= 0:
            raise DomainError("beta must be > 0")
        if self.samples_per_prompt < 2:
            raise DomainError("samples_per_prompt must be >= 2")
        if self.refresh_interval < 1 or self.stage_count < 1:
            raise DomainError("refresh_interval and stage_count must be >= 1")


@dataclass
class RewardTrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 64
    steps: int = 1500
    hidden: int = 32
    theta_tie: float = 1.5
    learn_tie: bool = False
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.theta_tie <= 1:
            raise DomainError("theta_tie must be > 1")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise DomainError("learning_rate must be > 0 and batch_size >= 1")


@dataclass(eq=False)
class RewardParams:
    """Scores a clip from mean-pooled features of (frame, next-frame difference) pairs.

    Prompts are not an input: motion quality is scored without context.
    """
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    phi: np.ndarray
    learn_tie: bool = False

    @classmethod
    def init(cls, dim, hidden, rng, theta_tie=1.5, learn_tie=False):
        if theta_tie <= 1:
            raise DomainError("theta_tie must be > 1")
        return cls(
            w1=rng.standard_normal((2 * dim, hidden)) / np.sqrt(2 * dim),
            b1=np.zeros(hidden),
            w2=rng.standard_normal(hidden) / np.sqrt(hidden),
            b2=np.zeros(()),
            phi=np.array(np.log(theta_tie - 1.0)),
            learn_tie=learn_tie,
        )

    @property
    def theta_tie(self):
        return 1.0 + float(np.exp(self.phi))

    def arrays(self):
        return {name: getattr(self, name) for name in REWARD_PARAM_NAMES}

    def copy(self):
        return RewardParams(**{k: np.array(v, copy=True) for k, v in self.arrays().items()},
                            learn_tie=self.learn_tie)

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())


# ------------------------------------------------------------
# Reward model
# ------------------------------------------------------------

def _motion_features(frames):
    x = np.asarray(frames, dtype=np.float64)
    if x.shape[-2] < 2:
        raise DomainError("reward scoring needs at least two frames")
    return np.concatenate([x[..., :-1, :], np.diff(x, axis=-2)], axis=-1)


def _reward_forward(params, frames):
    z = _motion_features(frames)
    h = np.tanh(z @ params.w1 + params.b1)
    pooled = h.mean(axis=-2)
    return pooled @ params.w2 + params.b2, (z, h, pooled)


def _reward_backward(params, tape, g_r):
    z, h, pooled = tape
    grads = {name: np.zeros_like(v) for name, v in params.arrays().items()}
    grads["w2"] = pooled.T @ g_r
    grads["b2"] = np.array(g_r.sum())
    g_pooled = g_r[:, None] * params.w2[None, :]
    g_a = (g_pooled[:, None, :] / h.shape[1]) * (1.0 - h ** 2)
    grads["w1"] = np.einsum("bkd,bkh->dh", z, g_a)
    grads["b1"] = g_a.sum(axis=(0, 1))
    return grads


def reward_scores(params, sequences):
    frames = np.stack([s.frames if isinstance(s, LatentSequence) else s for s in sequences])
    r, _ = _reward_forward(params, frames)
    return r


def btt_prob(r_a, r_b, theta_tie):
    """Rao-Kupper probabilities (a better, b better, tie) with pi = exp(r)."""
    if np.any(np.asarray(theta_tie) <= 1):
        raise DomainError("theta_tie must be > 1")
    d = np.asarray(r_a, dtype=np.float64) - np.asarray(r_b, dtype=np.float64)
    log_theta = np.log(theta_tie)
    p_a = expit(d - log_theta)
    p_b = expit(-d - log_theta)
    p_tie = (theta_tie ** 2 - 1.0) * p_a * p_b
    return p_a, p_b, p_tie


def _stack_pairs(pairs):
    a = np.stack([p.sample_a.frames for p in pairs])
    b = np.stack([p.sample_b.frames for p in pairs])
    codes = np.array([LABELS.index(p.label) for p in pairs])
    return a, b, codes


def btt_loss(params, pairs):
    """Mean negative log-likelihood of the pair labels, with gradient."""
    if not pairs:
        raise DomainError("btt_loss needs at least one pair")
    a, b, codes = _stack_pairs(pairs)
    n = len(pairs)
    r_a, tape_a = _reward_forward(params, a)
    r_b, tape_b = _reward_forward(params, b)
    theta = params.theta_tie
    log_theta = np.log(theta)
    d = r_a - r_b
    log_pa = log_expit(d - log_theta)
    log_pb = log_expit(-d - log_theta)
    log_pt = np.log(theta ** 2 - 1.0) + log_pa + log_pb
    log_p = np.choose(codes, [log_pa, log_pb, log_pt])
    loss = float(-np.mean(log_p))
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite BTT loss", {"pairs": n})

    q_a = 1.0 - expit(d - log_theta)
    q_b = 1.0 - expit(-d - log_theta)
    dlogp_dd = np.choose(codes, [q_a, -q_b, q_a - q_b])
    g_d = -dlogp_dd / n
    grads_a = _reward_backward(params, tape_a, g_d)
    grads_b = _reward_backward(params, tape_b, -g_d)
    grads = {k: grads_a[k] + grads_b[k] for k in grads_a}
    if params.learn_tie:
        dlogp_dtheta = np.choose(codes, [
            -q_a / theta,
            -q_b / theta,
            2 * theta / (theta ** 2 - 1.0) - (q_a + q_b) / theta,
        ])
        grads["phi"] = np.array(-np.sum(dlogp_dtheta) / n * (theta - 1.0))
    else:
        grads["phi"] = np.zeros(())
    return loss, grads


def ranking_accuracy(params, pairs):
    ordered = [p for p in pairs if p.label != TIE]
    if not ordered:
        return float("nan")
    a, b, codes = _stack_pairs(ordered)
    r_a, _ = _reward_forward(params, a)
    r_b, _ = _reward_forward(params, b)
    predicted = np.where(r_a > r_b, 0, 1)
    return float(np.mean(predicted == codes))


def train_reward(params, pairs, cfg, rng, progress=False):
    """Minibatch BTT training; returns (params, loss history DataFrame)."""
    optimizer = RMSProp(cfg.learning_rate)
    losses = []
    logger.info("Training reward model on %d pairs for %d steps", len(pairs), cfg.steps)
    for _ in tqdm(range(cfg.steps), disable=not progress, desc="reward"):
        idx = rng.integers(0, len(pairs), size=min(cfg.batch_size, len(pairs)))
        loss, grads = btt_loss(params, [pairs[i] for i in idx])
        optimizer.step(params, grads)
        losses.append(loss)
    return params, pd.DataFrame({"step": np.arange(len(losses)), "loss": losses})


def score_manual(counts):
    """Weighted motion-quality penalty from per-failure instance counts."""
    unknown = set(counts) - set(MOTION_QUALITY_WEIGHTS)
    if unknown:
        raise DomainError(f"unknown failure types: {sorted(unknown)}")
    return sum(MOTION_QUALITY_WEIGHTS[k] * int(v) for k, v in counts.items())


# ------------------------------------------------------------
# Automatic preference pairs
# ------------------------------------------------------------

def synthesize_distortion(video, kind, rng):
    """Corrupt a clip while keeping its (F, D) shape."""
    frames = video.frames if isinstance(video, LatentSequence) else np.asarray(video, dtype=np.float64)
    F = frames.shape[0]
    if F < 2:
        raise DomainError("distortions need at least two frames")
    i = np.arange(F)
    if kind == "reverse":
        out = frames[::-1].copy()
    elif kind == "resample_fast":
        out = frames[np.minimum(2 * i, F - 1)]
    elif kind == "resample_slow":
        out = frames[i // 2]
    elif kind == "jitter":
        out = frames[np.minimum(2 * ((i + 1) // 2), F - 1)]
    elif kind == "noise_inject":
        span = max(1, F // 4)
        start = int(rng.integers(0, F - span + 1))
        scale = 0.5 * (frames.std() or 1.0)
        out = frames.copy()
        out[start:start + span] += scale * rng.standard_normal((span, frames.shape[1]))
    else:
        raise DomainError(f"unknown distortion {kind!r}; expected one of {DISTORTION_KINDS}")
    return LatentSequence(out)


def build_auto_pairs(dataset, rng):
    """Clean vs distorted pairs, distortion kinds assigned round-robin."""
    offset = int(rng.integers(0, len(DISTORTION_KINDS)))
    pairs = []
    for n, video in enumerate(dataset):
        kind = DISTORTION_KINDS[(offset + n) % len(DISTORTION_KINDS)]
        distorted = synthesize_distortion(video, kind, rng)
        if rng.random() < 0.5:
            pairs.append(PreferencePair(video, distorted, A_BETTER, kind))
        else:
            pairs.append(PreferencePair(distorted, video, B_BETTER, kind))
    return pairs


def save_pairs(pairs, directory):
    """Write each clip as CSV plus a pairs.jsonl index referencing them by path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for n, pair in enumerate(pairs):
        path_a = directory / f"pair{n:05d}_a.csv"
        path_b = directory / f"pair{n:05d}_b.csv"
        write_frames_csv(pair.sample_a, path_a)
        write_frames_csv(pair.sample_b, path_b)
        lines.append(json.dumps({"a": path_a.name, "b": path_b.name,
                                 "label": pair.label, "kind": pair.kind}))
    index = directory / "pairs.jsonl"
    atomic_write_text(index, "\n".join(lines) + "\n")
    return index


def load_pairs(index_path):
    index_path = Path(index_path)
    pairs = []
    for line in index_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        pairs.append(PreferencePair(
            read_frames_csv(index_path.parent / row["a"]),
            read_frames_csv(index_path.parent / row["b"]),
            row["label"], row.get("kind", "")))
    return pairs


# ------------------------------------------------------------
# Flow-DPO
# ------------------------------------------------------------

def _half_sq_errors(params, xt, t, cond, target):
    pred, tape = forward(params, xt, t, cond)
    diff = pred - target
    per_sample = 0.5 * np.sum(diff ** 2, axis=(1, 2)) / xt.shape[1]
    return per_sample, diff, tape


def dpo_terms(model, ref, chosen, rejected, x0_w, x0_l, t_w, t_l, beta, cond=None):
    """Per-triplet DPO losses, implicit margins and the gradient of their mean.

    All arrays are batched (N, F, D) / (N, F). L = 0.5 * mean over frames of the
    squared velocity error, for the chosen (w) and rejected (l) clip.
    """
    n, F, _ = chosen.shape
    xt = np.concatenate([interpolate(chosen, x0_w, t_w), interpolate(rejected, x0_l, t_l)])
    target = np.concatenate([chosen - x0_w, rejected - x0_l])
    t = np.concatenate([t_w, t_l])
    c = None if cond is None else np.concatenate([cond, cond])
    l_model, diff, tape = _half_sq_errors(model, xt, t, c, target)
    l_ref, _, _ = _half_sq_errors(ref, xt, t, c, target)
    delta_model = l_model[:n] - l_model[n:]
    delta_ref = l_ref[:n] - l_ref[n:]
    z = -0.5 * beta * (delta_model - delta_ref)
    losses = np.logaddexp(0.0, -z)
    if not np.all(np.isfinite(losses)):
        raise NonFiniteError("non-finite DPO loss", {"triplets": n})
    coef = 0.5 * beta * expit(-z) / n
    sign = np.concatenate([coef, -coef])
    g_out = sign[:, None, None] * diff / F
    grads = backward(model, tape, g_out)
    return losses, expit(z), grads


def dpo_loss(model_params, ref_params, triplet, beta, x0, t, x0_rejected=None, t_rejected=None):
    """-log sigmoid(-beta/2 (delta_model - delta_ref)) for one triplet; gradient on model only.

    One (x0, t) draw is shared by all four error terms unless separate draws are
    given for the rejected clip.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    x0_l = x0 if x0_rejected is None else np.asarray(x0_rejected, dtype=np.float64)
    t_l = t if t_rejected is None else np.asarray(t_rejected, dtype=np.float64)
    cond = np.array([triplet.prompt])
    losses, _, grads = dpo_terms(
        model_params, ref_params,
        triplet.chosen.frames[None], triplet.rejected.frames[None],
        x0[None], x0_l[None], t[None], t_l[None], beta, cond)
    return float(losses[0]), grads


def _draw_noise(triplets, rng, T, independent):
    chosen = np.stack([tr.chosen.frames for tr in triplets])
    rejected = np.stack([tr.rejected.frames for tr in triplets])
    n, F, _ = chosen.shape

    def times():
        return np.stack([1.0 - fopp_sample(F, T, rng).as_array() / T for _ in range(n)])

    x0_w, t_w = rng.standard_normal(chosen.shape), times()
    if independent:
        x0_l, t_l = rng.standard_normal(chosen.shape), times()
    else:
        x0_l, t_l = x0_w, t_w
    cond = np.array([tr.prompt for tr in triplets])
    return chosen, rejected, x0_w, x0_l, t_w, t_l, cond


def implicit_margin(model, ref, triplets, beta, rng, T, independent=False):
    """Mean sigmoid(-beta/2 (delta_model - delta_ref)) over a triplet set."""
    chosen, rejected, x0_w, x0_l, t_w, t_l, cond = _draw_noise(triplets, rng, T, independent)
    _, margins, _ = dpo_terms(model, ref, chosen, rejected, x0_w, x0_l, t_w, t_l, beta, cond)
    return float(np.mean(margins))


def dpo_train(model, ref, triplets, cfg, rng, T, progress=False, stage=0):
    """One DPO stage on a frozen triplet set; returns per-step metrics."""
    optimizer = RMSProp(cfg.learning_rate)
    eval_seed = int(rng.integers(0, 2**63 - 1))
    rows = []
    for step in tqdm(range(cfg.refresh_interval), disable=not progress, desc=f"dpo stage {stage}"):
        idx = rng.integers(0, len(triplets), size=min(cfg.batch_size, len(triplets)))
        batch = [triplets[i] for i in idx]
        chosen, rejected, x0_w, x0_l, t_w, t_l, cond = _draw_noise(
            batch, rng, T, cfg.independent_draws)
        losses, _, grads = dpo_terms(model, ref, chosen, rejected, x0_w, x0_l, t_w, t_l,
                                     cfg.beta, cond)
        row = {"stage": stage, "step": step, "loss": float(np.mean(losses))}
        if step % cfg.eval_every == 0:
            row["margin"] = implicit_margin(model, ref, triplets, cfg.beta,
                                            np.random.default_rng(eval_seed), T,
                                            cfg.independent_draws)
        rows.append(row)
        optimizer.step(model, grads)
    final = implicit_margin(model, ref, triplets, cfg.beta,
                            np.random.default_rng(eval_seed), T, cfg.independent_draws)
    rows.append({"stage": stage, "step": cfg.refresh_interval, "margin": final})
    return pd.DataFrame(rows)


def _score(reward, samples):
    if isinstance(reward, RewardParams):
        return np.asarray(reward_scores(reward, samples))
    return np.array([float(reward(s)) for s in samples])


def build_triplets(params, reward, prompts, k, rng, rollout_cfg, T=None):
    """Per prompt, roll out k clips and pair the best with the worst by reward."""
    if k < 2:
        raise DomainError("need k >= 2 samples per prompt")
    prompts = list(prompts)
    streams = spawn_rngs(rng, len(prompts))

    def sample(job):
        prompt, stream = job
        clips = [rollout(params, rollout_cfg, prompt, stream, T) for _ in range(k)]
        return prompt, clips

    triplets, rewards = [], []
    for prompt, clips in parallel_map(sample, list(zip(prompts, streams))):
        scores = _score(reward, clips)
        best, worst = int(np.argmax(scores)), int(np.argmin(scores))
        if best == worst:
            best, worst = 0, 1
        if np.array_equal(clips[best].frames, clips[worst].frames):
            logger.warning("Prompt %s produced identical clips; skipped", prompt)
            continue
        triplets.append(Triplet(clips[best], clips[worst], int(prompt)))
        rewards.append({"prompt": int(prompt), "mean": float(np.mean(scores)),
                        "chosen": float(scores[best]), "rejected": float(scores[worst])})
    return triplets, rewards


def sample_reward(model, reward, prompts, k, rollout_cfg, seed, T=None):
    """Mean reward of k rollouts per prompt drawn from fixed seeded streams."""
    prompts = list(prompts)
    streams = spawn_rngs(np.random.default_rng(seed), len(prompts) * k)
    clips = [rollout(model, rollout_cfg, prompt, streams[i * k + j], T)
             for i, prompt in enumerate(prompts) for j in range(k)]
    return float(np.mean(_score(reward, clips)))


def dpo_stage_loop(model, cfg, reward, rollout_cfg, rng, T=None, progress=False):
    """Staged DPO: each stage freezes the current model as reference and rebuilds triplets.

    eval_reward_start/eval_reward_end score the model before and after a stage
    on the same seeded rollouts; one stage's end equals the next stage's start.
    """
    step_frames, stage_rows = [], []
    prompts = range(cfg.n_prompts)
    current = sample_reward(model, reward, prompts, cfg.samples_per_prompt, rollout_cfg, cfg.seed, T)
    for stage in range(cfg.stage_count):
        ref = model.copy()
        triplets, rewards = build_triplets(ref, reward, prompts, cfg.samples_per_prompt,
                                           rng, rollout_cfg, T)
        if not triplets:
            raise DomainError(f"stage {stage} produced no usable triplets")
        T_model = T or int(model.meta.get("timesteps", 20))
        logger.info("DPO stage %d: %d triplets", stage, len(triplets))
        steps = dpo_train(model, ref, triplets, cfg, rng, T_model, progress, stage)
        step_frames.append(steps)
        start, current = current, sample_reward(model, reward, prompts, cfg.samples_per_prompt,
                                                rollout_cfg, cfg.seed, T)
        stage_rows.append({
            "stage": stage,
            "first_loss": float(steps["loss"].iloc[0]),
            "last_loss": float(steps["loss"].dropna().iloc[-1]),
            "margin_start": float(steps["margin"].dropna().iloc[0]),
            "margin_end": float(steps["margin"].dropna().iloc[-1]),
            "sample_reward": float(np.mean([r["mean"] for r in rewards])),
            "reward_margin": float(np.mean([r["chosen"] - r["rejected"] for r in rewards])),
            "eval_reward_start": start,
            "eval_reward_end": current,
        })
    return model, pd.concat(step_frames, ignore_index=True), pd.DataFrame(stage_rows)


# ------------------------------------------------------------
# Distribution matching distillation
# ------------------------------------------------------------

def dmd_gradient(x, s_fake, s_real, dG_dtheta, t=None):
    """Monte Carlo E[(s_fake(x) - s_real(x)) . dG/dtheta] over the sample axis.

    x is (N, D); dG_dtheta is (N, D, P) or (N, D) for a scalar parameter.
    """
    x = np.asarray(x, dtype=np.float64)
    if t is None:
        diff = np.asarray(s_fake(x)) - np.asarray(s_real(x))
    else:
        diff = np.asarray(s_fake(x, t)) - np.asarray(s_real(x, t))
    sens = np.asarray(dG_dtheta, dtype=np.float64)
    if sens.ndim == 2:
        return float(np.einsum("nd,nd->", diff, sens) / x.shape[0])
    return np.einsum("nd,ndp->p", diff, sens) / x.shape[0]
