"""Per-frame timestep schedules: FoPP counting/sampling and the AD inference plan.

Timestep 0 is a clean frame and T is pure noise. Training schedules live in
[1, T]; inference plans also use 0 for frames that are already denoised.
"""
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from errors import DomainError

SUFFIX = "suffix"
PREFIX = "prefix"


# ------------------------------------------------------------
# Types
# ------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleVector:
    timesteps: tuple
    T: int

    def __post_init__(self):
        object.__setattr__(self, "timesteps", tuple(int(v) for v in self.timesteps))
        if not self.timesteps:
            raise DomainError("a schedule needs at least one frame")
        if self.T < 1:
            raise DomainError(f"T must be >= 1, got {self.T}")

    @property
    def F(self):
        return len(self.timesteps)

    @property
    def nondecreasing(self):
        return all(a <= b for a, b in zip(self.timesteps, self.timesteps[1:]))

    def as_array(self):
        return np.asarray(self.timesteps, dtype=np.int64)


@dataclass(frozen=True)
class DPTable:
    """Counts of non-decreasing timestep sequences.

    counts has (F+1) rows and (T+1) columns; row 0 and column 0 are padding (zero)
    so that counts[i][j] reads with the 1-based frame and timestep indices.
    """
    counts: tuple
    direction: str
    F: int
    T: int

    def __getitem__(self, i):
        return self.counts[i]

    def row_total(self, i, lo=1, hi=None):
        hi = self.T if hi is None else hi
        return sum(self.counts[i][lo:hi + 1])


@dataclass(frozen=True)
class SchedulePlan:
    steps: tuple
    s: int
    T: int

    def __len__(self):
        return len(self.steps)

    @property
    def F(self):
        return self.steps[0].F if self.steps else 0


def _check_domain(F, T):
    if F < 1 or T < 1:
        raise DomainError(f"need F >= 1 and T >= 1, got F={F}, T={T}")


# ------------------------------------------------------------
# Dynamic programming tables
# ------------------------------------------------------------

@lru_cache(maxsize=128)
def build_suffix_table(F, T):
    """d^s[i][j]: sequences (t_i=j, ..., t_F) non-decreasing within [j, T].

    d^s[i][j] = d^s[i][j+1] + d^s[i+1][j], with d^s[F][*] = 1 and d^s[*][T] = 1.
    """
    _check_domain(F, T)
    d = [[0] * (T + 1) for _ in range(F + 1)]
    for j in range(1, T + 1):
        d[F][j] = 1
    for i in range(F - 1, 0, -1):
        d[i][T] = 1
        for j in range(T - 1, 0, -1):
            d[i][j] = d[i][j + 1] + d[i + 1][j]
    return DPTable(tuple(tuple(row) for row in d), SUFFIX, F, T)


@lru_cache(maxsize=128)
def build_prefix_table(F, T):
    """d^e[i][j]: sequences (t_1, ..., t_i=j) non-decreasing within [1, j].

    d^e[i][j] = d^e[i][j-1] + d^e[i-1][j], with d^e[1][*] = 1 and d^e[*][1] = 1.
    """
    _check_domain(F, T)
    d = [[0] * (T + 1) for _ in range(F + 1)]
    for j in range(1, T + 1):
        d[1][j] = 1
    for i in range(2, F + 1):
        d[i][1] = 1
        for j in range(2, T + 1):
            d[i][j] = d[i][j - 1] + d[i - 1][j]
    return DPTable(tuple(tuple(row) for row in d), PREFIX, F, T)


def count_nondecreasing(F, T):
    _check_domain(F, T)
    return math.comb(F + T - 1, F)


def count_unconstrained(F, T):
    _check_domain(F, T)
    return T ** F


# ------------------------------------------------------------
# FoPP sampling
# ------------------------------------------------------------

@lru_cache(maxsize=4096)
def visit_probabilities(F, T, i, K, direction):
    """Exact distribution of t_i given its already fixed neighbour's timestep K.

    Returns (values, probabilities) where probabilities are Fractions. For frames
    after the anchor the support is [K, T]; before it, [1, K].
    """
    if direction == SUFFIX:
        table = build_suffix_table(F, T)
        values = tuple(range(K, T + 1))
    elif direction == PREFIX:
        table = build_prefix_table(F, T)
        values = tuple(range(1, K + 1))
    else:
        raise DomainError(f"unknown table direction {direction!r}")
    weights = [table[i][k] for k in values]
    total = sum(weights)
    return values, tuple(Fraction(w, total) for w in weights)


@lru_cache(maxsize=4096)
def _visit_cdf(F, T, i, K, direction):
    values, probs = visit_probabilities(F, T, i, K, direction)
    cdf = np.cumsum([float(p) for p in probs])
    cdf[-1] = 1.0
    return np.asarray(values, dtype=np.int64), cdf


def _draw(F, T, i, K, direction, rng):
    values, cdf = _visit_cdf(F, T, i, K, direction)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return int(values[min(idx, len(values) - 1)])


def fopp_sample(F, T, rng):
    """Anchor a uniform (frame, timestep), then fill both sides by visit probabilities."""
    _check_domain(F, T)
    t = [0] * (F + 1)
    f = int(rng.integers(1, F + 1))
    t[f] = int(rng.integers(1, T + 1))
    for i in range(f + 1, F + 1):
        t[i] = _draw(F, T, i, t[i - 1], SUFFIX, rng)
    for i in range(f - 1, 0, -1):
        t[i] = _draw(F, T, i, t[i + 1], PREFIX, rng)
    return ScheduleVector(tuple(t[1:]), T)


def fopp_sample_batch(F, T, n, rng):
    return np.stack([fopp_sample(F, T, rng).as_array() for _ in range(n)])


def validate_schedule(v):
    return all(0 <= x <= v.T for x in v.timesteps) and v.nondecreasing


# ------------------------------------------------------------
# Adaptive Difference scheduler
# ------------------------------------------------------------

def ad_schedule(F, T, s):
    """Full AD plan starting from all frames at T.

    Frames update left to right. A frame whose predecessor was already clean when
    the step began (and frame 1 always) denoises itself by one level; any other
    frame follows its predecessor's freshly updated value plus s, capped at T.
    """
    _check_domain(F, T)
    if not 0 <= s <= T:
        raise DomainError(f"s must lie in [0, {T}], got {s}")
    current = [T] * F
    steps = []
    while any(current):
        previous = list(current)
        for i in range(F):
            if i == 0 or previous[i - 1] == 0:
                current[i] = max(current[i] - 1, 0)
            else:
                current[i] = min(current[i - 1] + s, T)
        steps.append(ScheduleVector(tuple(current), T))
    return SchedulePlan(tuple(steps), s, T)


def ad_plan_length(F, T, s):
    return T + (F - 1) * min(s, T)


def plan_matrix(plan, include_initial=False):
    """Plan as an int array, rows = steps, columns = frames."""
    rows = [step.timesteps for step in plan.steps]
    if include_initial and rows:
        rows = [(plan.T,) * len(rows[0])] + rows
    return np.asarray(rows, dtype=np.int64)
