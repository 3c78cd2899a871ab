"""Flow matching on latent frame sequences.

Conventions: flow time t follows x_t = t*x1 + (1 - t)*x0, so t = 1 is data and
t = 0 is noise. A schedule level k out of T means noise level k/T, i.e. flow time
1 - k/T. LatentSequence.per_frame_t stores the noise level.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit
from tqdm import tqdm

from errors import DomainError, NonFiniteError
from schedule_core import SchedulePlan, plan_matrix

logger = logging.getLogger(__name__)

PARAM_NAMES = (
    "w_in", "b_in", "w_time", "pos", "prompt", "w_ctx",
    "w_hid", "b_hid", "w_out", "b_out",
)


# ------------------------------------------------------------
# Types
# ------------------------------------------------------------

@dataclass(eq=False)
class LatentSequence:
    frames: np.ndarray
    per_frame_t: np.ndarray = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise DomainError(f"frames must be an F x D array, got shape {self.frames.shape}")
        if self.per_frame_t is not None:
            self.per_frame_t = np.asarray(self.per_frame_t, dtype=np.float64)
            if self.per_frame_t.shape != (self.F,):
                raise DomainError("per_frame_t must have one entry per frame")
            if np.any(self.per_frame_t < 0) or np.any(self.per_frame_t > 1):
                raise DomainError("per_frame_t entries must lie in [0, 1]")

    @property
    def F(self):
        return self.frames.shape[0]

    @property
    def D(self):
        return self.frames.shape[1]


@dataclass
class ModelConfig:
    dim: int = 16
    max_frames: int = 8
    hidden: int = 64
    n_prompts: int = 8
    time_freqs: int = 8

    def __post_init__(self):
        if min(self.dim, self.max_frames, self.hidden, self.n_prompts, self.time_freqs) < 1:
            raise DomainError("model sizes must all be >= 1")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    steps: int = 5000
    seed: int = 0
    logit_mean: float = 0.0
    logit_std: float = 1.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.logit_std <= 0:
            raise DomainError("logit_std must be > 0")


def _frames(x):
    if isinstance(x, LatentSequence):
        return x.frames
    return np.asarray(x, dtype=np.float64)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {a.shape} vs {b.shape}")


# ------------------------------------------------------------
# Denoiser
# ------------------------------------------------------------

def time_embedding(t, freqs):
    """Sinusoidal features of flow time, shape t.shape + (2*freqs,)."""
    t = np.asarray(t, dtype=np.float64)
    scales = np.pi * 2.0 ** np.arange(freqs)
    angles = t[..., None] * scales
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class ContextCache:
    """Running sums over leading frames that stay fixed for a whole sampling plan."""

    def __init__(self):
        self.frozen = 0
        self.ctx = None
        self.running = None

    def filled(self, frozen):
        return self.ctx is not None and self.frozen == frozen


def _accumulate(x, ctx, running, lo, hi):
    for f in range(lo, hi):
        if f > 0:
            ctx[:, f] = running / f
        running = running + x[:, f]
    return running


def causal_context(x, cache=None, frozen=0):
    """Mean of the preceding frames for every frame (zeros for the first)."""
    B, F, D = x.shape
    ctx = np.zeros_like(x)
    running = np.zeros((B, D))
    start = 0
    if cache is not None and frozen > 0:
        if cache.filled(frozen):
            ctx[:, :frozen] = cache.ctx
            running = cache.running
        else:
            running = _accumulate(x, ctx, running, 0, frozen)
            cache.frozen = frozen
            cache.ctx = ctx[:, :frozen].copy()
            cache.running = running.copy()
        start = frozen
    _accumulate(x, ctx, running, start, F)
    return ctx


@dataclass(eq=False)
class DenoiserParams:
    """Per-frame residual MLP predicting the velocity field.

    a1 = x W_in + b_in + emb(t) W_time + pos[f] + prompt[c] + ctx W_ctx
    h1 = tanh(a1); h2 = h1 + tanh(h1 W_hid + b_hid); u = h2 W_out + b_out
    """
    w_in: np.ndarray
    b_in: np.ndarray
    w_time: np.ndarray
    pos: np.ndarray
    prompt: np.ndarray
    w_ctx: np.ndarray
    w_hid: np.ndarray
    b_hid: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    time_freqs: int = 8
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg, rng):
        D, H, K = cfg.dim, cfg.hidden, cfg.time_freqs

        def dense(fan_in, fan_out, gain=1.0):
            return rng.standard_normal((fan_in, fan_out)) * gain / np.sqrt(fan_in)

        return cls(
            w_in=dense(D, H),
            b_in=np.zeros(H),
            w_time=dense(2 * K, H),
            pos=rng.standard_normal((cfg.max_frames, H)) * 0.1,
            prompt=rng.standard_normal((cfg.n_prompts, H)) * 0.1,
            w_ctx=dense(D, H, 0.5),
            w_hid=dense(H, H),
            b_hid=np.zeros(H),
            w_out=dense(H, D, 0.5),
            b_out=np.zeros(D),
            time_freqs=K,
        )

    @property
    def dim(self):
        return self.w_in.shape[0]

    @property
    def hidden(self):
        return self.w_in.shape[1]

    @property
    def max_frames(self):
        return self.pos.shape[0]

    @property
    def n_prompts(self):
        return self.prompt.shape[0]

    def arrays(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return DenoiserParams(**{k: v.copy() for k, v in self.arrays().items()},
                              time_freqs=self.time_freqs, meta=dict(self.meta))

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.arrays().items()}

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())

    def velocity(self, x, t, cond=None, cache=None, frozen=0):
        """u_theta for one sequence (F, D) or a batch (B, F, D)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        xb = x[None] if single else x
        tb = np.broadcast_to(np.asarray(t, dtype=np.float64), xb.shape[:2])
        out, _ = forward(self, xb, tb, _cond_batch(cond, xb.shape[0]), cache, frozen)
        return out[0] if single else out

    __call__ = velocity


def _cond_batch(cond, batch):
    if cond is None:
        return None
    cond = np.asarray(cond, dtype=np.int64)
    if cond.ndim == 0:
        cond = np.full(batch, int(cond))
    return cond


def forward(params, x, t, cond=None, cache=None, frozen=0):
    """Forward pass over (B, F, D); frames are evaluated one at a time."""
    B, F, D = x.shape
    if D != params.dim:
        raise DomainError(f"model expects D={params.dim}, got {D}")
    if F > params.max_frames:
        raise DomainError(f"model supports at most {params.max_frames} frames, got {F}")
    ctx = causal_context(x, cache, frozen)
    temb = time_embedding(t, params.time_freqs)
    prompt = params.prompt[cond] if cond is not None else None
    out = np.empty_like(x)
    tape = {"x": x, "ctx": ctx, "temb": temb, "cond": cond, "h1": [], "a2": [], "h2": []}
    for f in range(F):
        a1 = (x[:, f] @ params.w_in + params.b_in + temb[:, f] @ params.w_time
              + params.pos[f] + ctx[:, f] @ params.w_ctx)
        if prompt is not None:
            a1 = a1 + prompt
        h1 = np.tanh(a1)
        a2 = h1 @ params.w_hid + params.b_hid
        h2 = h1 + np.tanh(a2)
        out[:, f] = h2 @ params.w_out + params.b_out
        tape["h1"].append(h1)
        tape["a2"].append(a2)
        tape["h2"].append(h2)
    return out, tape


def backward(params, tape, g_out):
    """Parameter gradients given dL/d(output) of shape (B, F, D)."""
    grads = params.zeros_like()
    x, ctx, temb, cond = tape["x"], tape["ctx"], tape["temb"], tape["cond"]
    for f in range(x.shape[1]):
        g = g_out[:, f]
        h1, a2, h2 = tape["h1"][f], tape["a2"][f], tape["h2"][f]
        grads["w_out"] += h2.T @ g
        grads["b_out"] += g.sum(axis=0)
        gh2 = g @ params.w_out.T
        ga2 = gh2 * (1.0 - np.tanh(a2) ** 2)
        grads["w_hid"] += h1.T @ ga2
        grads["b_hid"] += ga2.sum(axis=0)
        gh1 = gh2 + ga2 @ params.w_hid.T
        ga1 = gh1 * (1.0 - h1 ** 2)
        grads["w_in"] += x[:, f].T @ ga1
        grads["b_in"] += ga1.sum(axis=0)
        grads["w_time"] += temb[:, f].T @ ga1
        grads["pos"][f] += ga1.sum(axis=0)
        grads["w_ctx"] += ctx[:, f].T @ ga1
        if cond is not None:
            np.add.at(grads["prompt"], cond, ga1)
    return grads


# ------------------------------------------------------------
# Flow-matching objective
# ------------------------------------------------------------

def interpolate(x1, x0, t):
    """x_t = t*x1 + (1-t)*x0, frame by frame with that frame's t."""
    a, b = _frames(x1), _frames(x0)
    _check_same_shape(a, b)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != a.shape[:-1]:
        raise DomainError(f"need one t per frame: t shape {t.shape}, frames {a.shape}")
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("t entries must lie in [0, 1]")
    tt = t[..., None]
    out = tt * a + (1.0 - tt) * b
    if isinstance(x1, LatentSequence):
        return LatentSequence(out, 1.0 - t)
    return out


def target_velocity(x1, x0):
    a, b = _frames(x1), _frames(x0)
    _check_same_shape(a, b)
    out = a - b
    if isinstance(x1, LatentSequence):
        return LatentSequence(out)
    return out


def sample_timestep_logitnormal(rng, m=0.0, s=1.0, size=None):
    """sigmoid(z) with z ~ N(m, s^2), kept strictly inside (0, 1)."""
    if s <= 0:
        raise DomainError("logit-normal scale must be > 0")
    t = expit(rng.normal(m, s, size=size))
    return np.clip(t, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def _batched(x1, x0, t):
    a, b = _frames(x1), _frames(x0)
    _check_same_shape(a, b)
    t = np.asarray(t, dtype=np.float64)
    if a.ndim == 2:
        a, b, t = a[None], b[None], t[None]
    return a, b, np.broadcast_to(t, a.shape[:2])


def _ensure_finite(where, **arrays):
    bad = [name for name, arr in arrays.items() if not np.all(np.isfinite(arr))]
    if bad:
        raise NonFiniteError(f"non-finite values in {where}", {"arrays": ",".join(bad)})


def fm_loss(params, x1, x0, t, cond=None):
    """Mean over batch and frames of ||u_theta(x_t, c, t) - (x1 - x0)||^2, with gradient."""
    a, b, tb = _batched(x1, x0, t)
    _ensure_finite("fm_loss inputs", x1=a, x0=b, t=tb)
    xt = interpolate(a, b, tb)
    pred, tape = forward(params, xt, tb, _cond_batch(cond, a.shape[0]))
    _ensure_finite("fm_loss forward", prediction=pred)
    diff = pred - (a - b)
    n = a.shape[0] * a.shape[1]
    loss = float(np.sum(diff ** 2) / n)
    grads = backward(params, tape, 2.0 * diff / n)
    return loss, grads


def closed_form_velocity_gaussian(x_t, t, sigma1):
    """E[x1 - x0 | x_t] for x1 ~ N(0, sigma1^2 I), x0 ~ N(0, I)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    s2 = sigma1 ** 2
    coef = (t * s2 - (1.0 - t)) / (t ** 2 * s2 + (1.0 - t) ** 2)
    if coef.ndim and coef.shape == x_t.shape[:coef.ndim] and coef.ndim < x_t.ndim:
        coef = coef[..., None]
    return coef * x_t


# ------------------------------------------------------------
# ODE sampling
# ------------------------------------------------------------

def _evaluate(model, x, t, cond, cache, frozen):
    if isinstance(model, DenoiserParams):
        return model.velocity(x, t, cond, cache=cache, frozen=frozen)
    return np.asarray(model(x, t, cond), dtype=np.float64)


def integrate_levels(model, levels, x, T, cond=None, cache=None, frozen=0):
    """Euler integration along a level matrix (rows = states, first row = start).

    A frame moves only on steps where its level drops; frames whose level does not
    change are never written.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    levels = np.asarray(levels, dtype=np.int64)
    for k in range(len(levels) - 1):
        before, after = levels[k], levels[k + 1]
        active = after < before
        if not active.any():
            continue
        t = 1.0 - before / T
        v = _evaluate(model, x, np.broadcast_to(t, x.shape[:-1]), cond, cache, frozen)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("non-finite velocity in sampler", {"step": k})
        dt = (before - after)[active] / T
        x[..., active, :] = x[..., active, :] + dt[:, None] * v[..., active, :]
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite sampler state", {"steps": len(levels) - 1})
    return x


def euler_sample(model, plan: SchedulePlan, x_init, cond=None):
    """Integrate du/dt along the plan; x_init is (F, D) or a batch (B, F, D).

    model is DenoiserParams or any callable (x, t, cond) -> velocity.
    """
    x_init = _frames(x_init)
    if x_init.shape[-2] != plan.F:
        raise DomainError(f"plan covers {plan.F} frames, x_init has {x_init.shape[-2]}")
    levels = plan_matrix(plan, include_initial=True)
    x = integrate_levels(model, levels, x_init, plan.T, cond)
    if x.ndim == 2:
        return LatentSequence(x, np.zeros(x.shape[0]))
    return x


# ------------------------------------------------------------
# Optimisation
# ------------------------------------------------------------

class RMSProp:
    """Per-parameter RMS-scaled steps with decoupled weight decay."""

    def __init__(self, learning_rate=1e-3, decay=0.99, eps=1e-8, weight_decay=0.0):
        self.learning_rate = learning_rate
        self.decay = decay
        self.eps = eps
        self.weight_decay = weight_decay
        self.sq = {}
        self.count = 0

    def step(self, params, grads):
        self.count += 1
        correction = 1.0 - self.decay ** self.count
        for name, g in grads.items():
            p = getattr(params, name)
            sq = self.sq.get(name)
            if sq is None:
                sq = np.zeros_like(p)
            sq = self.decay * sq + (1.0 - self.decay) * g * g
            self.sq[name] = sq
            update = g / (np.sqrt(sq / correction) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= self.learning_rate * update
        if not params.is_finite():
            raise NonFiniteError("parameters became non-finite", {"step": self.count})


def fm_train_step(params, optimizer, batch, cond, rng, cfg=None):
    """Plain synchronous flow-matching step: one logit-normal t per example."""
    cfg = cfg or TrainConfig()
    batch = np.asarray(batch, dtype=np.float64)
    B, F, _ = batch.shape
    t = sample_timestep_logitnormal(rng, cfg.logit_mean, cfg.logit_std, size=B)
    t = np.repeat(t[:, None], F, axis=1)
    x0 = rng.standard_normal(batch.shape)
    loss, grads = fm_loss(params, batch, x0, t, cond)
    optimizer.step(params, grads)
    return loss


def train_denoiser(params, data, cfg: TrainConfig, cond=None, step_fn=None, progress=False):
    """Run cfg.steps optimisation steps; returns (params, loss history DataFrame)."""
    data = np.asarray(data, dtype=np.float64)
    step_fn = step_fn or (lambda p, o, b, c, r: fm_train_step(p, o, b, c, r, cfg))
    rng = np.random.default_rng(cfg.seed)
    optimizer = RMSProp(cfg.learning_rate, weight_decay=cfg.weight_decay)
    losses = []
    logger.info("Training for %d steps on %d sequences", cfg.steps, len(data))
    for step in tqdm(range(cfg.steps), disable=not progress, desc="train"):
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        batch_cond = None if cond is None else np.asarray(cond)[idx]
        loss = step_fn(params, optimizer, data[idx], batch_cond, rng)
        losses.append(loss)
        if step % 500 == 0:
            logger.debug("step %d loss %.6f", step, loss)
    history = pd.DataFrame({"step": np.arange(len(losses)), "loss": losses})
    if losses:
        logger.info("Final loss %.6f", losses[-1])
    return params, history


def velocity_error_vs_closed_form(params, sigma1, frames, rng, n_points=512):
    """Relative L2 error of the learned field against the Gaussian oracle."""
    t = np.linspace(0.05, 0.95, 19)
    errs, norms = 0.0, 0.0
    for tk in t:
        std = np.sqrt(tk ** 2 * sigma1 ** 2 + (1 - tk) ** 2)
        x_t = rng.standard_normal((n_points, frames, params.dim)) * std
        tt = np.full((n_points, frames), tk)
        pred = params.velocity(x_t, tt)
        true = closed_form_velocity_gaussian(x_t, tt, sigma1)
        errs += float(np.sum((pred - true) ** 2))
        norms += float(np.sum(true ** 2))
    return float(np.sqrt(errs / norms))
