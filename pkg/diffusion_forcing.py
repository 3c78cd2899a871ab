"""Diffusion forcing: per-frame noise training and sliding-window rollout."""
import logging
from dataclasses import dataclass

import numpy as np

from errors import DomainError, NonFiniteError, RolloutError
from flow_match import (
    ContextCache,
    LatentSequence,
    euler_sample,
    fm_loss,
    integrate_levels,
    interpolate,
    train_denoiser,
)
from runtime import make_rng, parallel_map, spawn_rngs
from schedule_core import ScheduleVector, ad_schedule, fopp_sample, plan_matrix

logger = logging.getLogger(__name__)

DEFAULT_TIMESTEPS = 20
DYNAMICS = ("blob", "bounce", "linear-gaussian")
BOUNCE_SPEED_SCALE = 0.1
BLOB_WIDTH = 1.5


# ------------------------------------------------------------
# Configuration types
# ------------------------------------------------------------

@dataclass
class ToyVideoSpec:
    kind: str = "blob"
    dim: int = 16
    frames: int = 8
    process_noise: float = 0.0
    seed: int = 0
    sigma1: float = 2.0
    speed_min: float = 0.8
    speed_max: float = 1.2
    ar_coef: float = 0.0
    harmonics: int = 3

    def __post_init__(self):
        if self.kind not in DYNAMICS:
            raise DomainError(f"unknown dynamics {self.kind!r}; expected one of {DYNAMICS}")
        if self.frames < 1:
            raise DomainError("frames must be >= 1")
        if self.kind == "blob" and self.dim < 3:
            raise DomainError("blob dynamics need dim >= 3")
        if self.kind == "bounce" and self.dim < 2:
            raise DomainError("bounce dynamics need dim >= 2")
        if self.process_noise < 0:
            raise DomainError("process_noise must be >= 0")
        if not 0 <= self.ar_coef < 1:
            raise DomainError("ar_coef must lie in [0, 1)")


@dataclass
class RolloutConfig:
    f_prev: int = 2
    f_new: int = 2
    total_frames: int = 16
    history_noise_t: float = 0.02
    s: int = 1

    def __post_init__(self):
        if self.f_prev < 1 or self.f_new < 1:
            raise DomainError("f_prev and f_new must be >= 1")
        if self.total_frames < self.f_new:
            raise DomainError("total_frames must be >= f_new")
        if not 0 <= self.history_noise_t <= 0.2:
            raise DomainError("history_noise_t must lie in [0, 0.2]")

    @property
    def window(self):
        return self.f_prev + self.f_new


def history_level(cfg, T):
    """Discrete level the history frames are pinned at during a window.

    Any positive history noise maps to at least level 1, so a small
    history_noise_t never collapses onto the clean-history baseline.
    """
    level = int(round(cfg.history_noise_t * T))
    if cfg.history_noise_t > 0:
        level = max(1, level)
    if level >= T - 1 and level > 0:
        raise DomainError(
            f"history level {level} is not below the first level fresh frames take ({T - 1})")
    if not 0 <= cfg.s <= T:
        raise DomainError(f"s must lie in [0, {T}], got {cfg.s}")
    return level


# ------------------------------------------------------------
# Toy dynamics
# ------------------------------------------------------------

def _blob_coefficients(spec):
    top = max(1, min(spec.harmonics, (spec.dim - 1) // 2))
    h = np.arange(1, top + 1)
    c = np.exp(-0.5 * (h / BLOB_WIDTH) ** 2)
    return h, 0.5 * c / c.sum()


def _reflect(p, v):
    p, v = p.copy(), v.copy()
    for axis in range(p.shape[0]):
        while p[axis] < 0.0 or p[axis] > 1.0:
            if p[axis] < 0.0:
                p[axis] = -p[axis]
            else:
                p[axis] = 2.0 - p[axis]
            v[axis] = -v[axis]
    return p, v


def bounce_path(p0, v0, frames):
    """Positions of a point reflecting off the unit box walls."""
    p, v = np.asarray(p0, dtype=np.float64), np.asarray(v0, dtype=np.float64)
    path = [p.copy()]
    for _ in range(frames - 1):
        p, v = _reflect(p + v, v)
        path.append(p.copy())
    return np.array(path)


def toy_trajectory(spec, rng):
    """Latent state path of one clip: ring phase, box position or AR(1) vectors."""
    if spec.kind == "blob":
        p = rng.uniform(0.0, spec.dim)
        v = rng.uniform(spec.speed_min, spec.speed_max)
        kicks = np.concatenate([[0.0], np.cumsum(rng.standard_normal(spec.frames - 1))])
        return p + v * np.arange(spec.frames) + spec.process_noise * kicks
    if spec.kind == "bounce":
        p = rng.uniform(0.0, 1.0, size=2)
        angle = rng.uniform(0.0, 2 * np.pi)
        speed = rng.uniform(spec.speed_min, spec.speed_max) * BOUNCE_SPEED_SCALE
        v = speed * np.array([np.cos(angle), np.sin(angle)])
        path = [p.copy()]
        for _ in range(spec.frames - 1):
            kick = spec.process_noise * BOUNCE_SPEED_SCALE * rng.standard_normal(2)
            p, v = _reflect(p + v + kick, v)
            path.append(p.copy())
        return np.array(path)
    a = spec.ar_coef
    x = np.empty((spec.frames, spec.dim))
    x[0] = spec.sigma1 * rng.standard_normal(spec.dim)
    for k in range(1, spec.frames):
        x[k] = a * x[k - 1] + np.sqrt(1.0 - a * a) * spec.sigma1 * rng.standard_normal(spec.dim)
    return x


def render_frames(spec, trajectory):
    if spec.kind == "blob":
        h, c = _blob_coefficients(spec)
        j = np.arange(spec.dim)
        phase = 2 * np.pi * (j[None, :] - np.asarray(trajectory)[:, None]) / spec.dim
        return 0.5 + np.sum(c[:, None, None] * np.cos(h[:, None, None] * phase[None]), axis=0)
    if spec.kind == "bounce":
        traj = np.asarray(trajectory)
        return np.stack([np.resize(p, spec.dim) for p in traj])
    return np.asarray(trajectory, dtype=np.float64)


def estimate_positions(frames, spec):
    """Recover the latent position of each frame (blob phase or box point)."""
    frames = np.asarray(frames, dtype=np.float64)
    if spec.kind == "blob":
        j = np.arange(spec.dim)
        z = frames @ np.exp(2j * np.pi * j / spec.dim)
        return np.mod(np.angle(z) * spec.dim / (2 * np.pi), spec.dim)
    if spec.kind == "bounce":
        return np.stack([frames[:, 0::2].mean(axis=1), frames[:, 1::2].mean(axis=1)], axis=1)
    raise DomainError("linear-gaussian clips have no position")


def make_toy_dataset(spec, n, rng=None):
    rng = make_rng(spec.seed if rng is None else rng)
    streams = spawn_rngs(rng, n)

    def build(child):
        return LatentSequence(render_frames(spec, toy_trajectory(spec, child)))

    return parallel_map(build, streams)


def dataset_array(dataset):
    return np.stack([seq.frames for seq in dataset])


# ------------------------------------------------------------
# Drift
# ------------------------------------------------------------

def _wrap(d, period):
    return (d + period / 2) % period - period / 2


def drift_profile(frames, spec, window=None):
    """Per-frame deviation from the oracle trajectory fitted to the first window."""
    frames = np.asarray(frames, dtype=np.float64)
    F = frames.shape[0]
    window = min(window or spec.frames, F)
    k = np.arange(F)
    if spec.kind == "linear-gaussian":
        power = np.mean(frames ** 2, axis=1) / spec.sigma1 ** 2
        return np.abs(power - 1.0)
    pos = estimate_positions(frames, spec)
    if spec.kind == "blob":
        unwrapped = np.unwrap(pos * 2 * np.pi / spec.dim) * spec.dim / (2 * np.pi)
        if window >= 2:
            v, p0 = np.polyfit(k[:window], unwrapped[:window], 1)
        else:
            v, p0 = 0.0, unwrapped[0]
        oracle = p0 + v * k
        return np.abs(_wrap(pos - oracle, spec.dim))
    # bounce: fit assumes no wall contact inside the first window
    if window >= 2:
        coef = np.polyfit(k[:window], pos[:window], 1)
        v0, p0 = coef[0], coef[1]
    else:
        v0, p0 = np.zeros(2), pos[0]
    start, v_start = _reflect(p0, v0)
    oracle = bounce_path(start, v_start, F)
    return np.linalg.norm(pos - oracle, axis=1)


def drift_metric(generated, spec, window=None):
    """Mean deviation over the frames after the fitted window (all frames if none)."""
    frames = generated.frames if isinstance(generated, LatentSequence) else generated
    profile = drift_profile(frames, spec, window)
    window = min(window or spec.frames, len(profile))
    tail = profile[window:] if len(profile) > window else profile
    return float(np.mean(tail))


def segment_drift(generated, spec, cfg):
    """Drift per rollout segment; segment 0 is the first window."""
    frames = generated.frames if isinstance(generated, LatentSequence) else generated
    window = min(cfg.window, len(frames))
    profile = drift_profile(frames, spec, window)
    rows = [{"segment": 0, "start": 0, "end": window, "drift": float(np.mean(profile[:window]))}]
    start = window
    while start < len(frames):
        end = min(start + cfg.f_new, len(frames))
        rows.append({"segment": len(rows), "start": start, "end": end,
                     "drift": float(np.mean(profile[start:end]))})
        start = end
    return rows


# ------------------------------------------------------------
# Training
# ------------------------------------------------------------

def df_train_step(params, optimizer, batch, cond, rng, T, schedule_fn=fopp_sample):
    """One optimiser step with an independent FoPP schedule per example."""
    batch = np.asarray(batch, dtype=np.float64)
    B, F, _ = batch.shape
    levels = np.empty((B, F), dtype=np.int64)
    for b in range(B):
        vector = schedule_fn(F, T, rng)
        levels[b] = vector.as_array()
    t = 1.0 - levels / T
    x0 = rng.standard_normal(batch.shape)
    loss, grads = fm_loss(params, batch, x0, t, cond)
    optimizer.step(params, grads)
    return loss, params


def train_df(params, data, cfg, T=DEFAULT_TIMESTEPS, cond=None, progress=False):
    params.meta["timesteps"] = T

    def step(p, opt, batch, c, rng):
        return df_train_step(p, opt, batch, c, rng, T)[0]

    return train_denoiser(params, data, cfg, cond=cond, step_fn=step, progress=progress)


def constant_schedule(level):
    """Schedule function giving every frame the same level (synchronous diffusion)."""

    def schedule(F, T, rng):
        return ScheduleVector((level,) * F, T)

    return schedule


# ------------------------------------------------------------
# Rollout
# ------------------------------------------------------------

def _timesteps_of(params, T):
    if T is not None:
        return T
    return int(params.meta.get("timesteps", DEFAULT_TIMESTEPS))


def _check_window(params, cfg):
    if cfg.window > params.max_frames:
        raise DomainError(
            f"window of {cfg.window} frames exceeds the model's {params.max_frames}")


def _first_window(params, cfg, cond, rng, T, first_frame, use_cache):
    n = min(cfg.window, cfg.total_frames)
    if first_frame is None:
        plan = ad_schedule(n, T, cfg.s)
        x_init = rng.standard_normal((n, params.dim))
        return euler_sample(params, plan, x_init, cond).frames
    first_frame = np.asarray(first_frame, dtype=np.float64).reshape(-1)
    if first_frame.shape[0] != params.dim:
        raise DomainError(f"first frame has {first_frame.shape[0]} values, model expects {params.dim}")
    if n < 2:
        raise DomainError("first-frame conditioning needs at least two frames")
    plan = ad_schedule(n - 1, T, cfg.s)
    fresh = plan_matrix(plan, include_initial=True)
    levels = np.hstack([np.zeros((len(fresh), 1), dtype=np.int64), fresh])
    x = np.vstack([first_frame[None], rng.standard_normal((n - 1, params.dim))])
    cache = ContextCache() if use_cache else None
    return integrate_levels(params, levels, x, T, cond, cache=cache, frozen=1)


def iter_rollout_windows(params, cfg, cond, rng, T=None, use_cache=True, first_frame=None):
    """Yield (iteration, window state after denoising, frames generated so far)."""
    T = _timesteps_of(params, T)
    _check_window(params, cfg)
    h = history_level(cfg, T)
    try:
        generated = _first_window(params, cfg, cond, rng, T, first_frame, use_cache)
    except NonFiniteError as exc:
        raise RolloutError(0, exc.diagnostics) from exc
    logger.debug("rollout iteration 0: %d frames", len(generated))
    yield 0, generated, generated
    iteration = 0
    while len(generated) < cfg.total_frames:
        iteration += 1
        n_new = min(cfg.f_new, cfg.total_frames - len(generated))
        history = generated[-cfg.f_prev:]
        noise = rng.standard_normal(history.shape)
        marked = interpolate(history, noise, np.full(len(history), 1.0 - h / T))
        fresh = plan_matrix(ad_schedule(n_new, T, cfg.s), include_initial=True)
        levels = np.hstack([np.full((len(fresh), len(history)), h, dtype=np.int64), fresh])
        x = np.vstack([marked, rng.standard_normal((n_new, params.dim))])
        cache = ContextCache() if use_cache else None
        try:
            window = integrate_levels(params, levels, x, T, cond, cache=cache, frozen=len(history))
        except NonFiniteError as exc:
            raise RolloutError(iteration, exc.diagnostics) from exc
        generated = np.vstack([generated, window[len(history):]])
        logger.debug("rollout iteration %d: %d frames", iteration, len(generated))
        yield iteration, window, generated


def rollout(params, cfg, cond, rng, T=None, use_cache=True):
    """Generate cfg.total_frames frames with a sliding window of f_prev + f_new."""
    generated = None
    for _, _, generated in iter_rollout_windows(params, cfg, cond, rng, T, use_cache):
        pass
    return LatentSequence(generated, np.zeros(len(generated)))


def condition_on_first_frame(params, first_frame, cfg, rng, T=None, use_cache=True, cond=None):
    """Rollout whose first frame is a clean reference kept at level 0 throughout."""
    generated = None
    for _, _, generated in iter_rollout_windows(
            params, cfg, cond=cond, rng=rng, T=T, use_cache=use_cache, first_frame=first_frame):
        pass
    return LatentSequence(generated, np.zeros(len(generated)))


def multi_seed_drift(params, cfg, spec, seeds, cond=0, T=None):
    """Drift of independent rollouts, one per seed, evaluated in parallel."""

    def run(seed):
        seq = rollout(params, cfg, cond, np.random.default_rng(seed), T)
        return {"seed": seed, "drift": drift_metric(seq, spec, cfg.window),
                "finite": bool(np.all(np.isfinite(seq.frames)))}

    return parallel_map(run, list(seeds))
