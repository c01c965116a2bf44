"""Composite reward for scoring raw agent allocations.

``R = R_env + R_constraint + R_bonus``: a dispersion penalty on the observed
marginal ROI, a penalty for malformed or budget-violating vectors, and a
bonus for moving budget in the direction the last episode suggested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from budgetalloc.envmodel import Environment, EpisodeRecord, env_evaluate
from budgetalloc.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.5
    big_penalty: float = 100.0
    delta: float = 0.2
    tau: float = 0.2
    budget: float = 6.0
    periods: int = 6

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if not self.big_penalty > 0:
            raise ConfigError(f"big_penalty must be > 0, got {self.big_penalty}")
        if not self.delta >= 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")

    @classmethod
    def for_env(cls, env: Environment, **kwargs) -> RewardConfig:
        return cls(budget=env.budget, periods=env.periods, **kwargs)


@dataclass(frozen=True)
class RewardBreakdown:
    env: float
    constraint: float
    bonus: float
    total: float

    @classmethod
    def of(cls, env: float, constraint: float, bonus: float) -> RewardBreakdown:
        return cls(env, constraint, bonus, env + constraint + bonus)


def reward_env(mroi, cfg: RewardConfig) -> float:
    m = np.asarray(mroi, dtype=float)
    if m.shape != (cfg.periods,):
        raise ShapeError(f"mroi has shape {m.shape}, expected ({cfg.periods},)")
    return float(-cfg.alpha * np.abs(m - m.mean()).sum())


def _is_wellformed(raw, periods: int) -> bool:
    x = np.asarray(raw, dtype=float)
    return x.ndim == 1 and x.shape[0] == periods and bool(np.all(np.isfinite(x)))


def reward_constraint(raw_alloc, cfg: RewardConfig) -> float:
    """``-M`` for a wrong dimension, else ``-|sum - B|``.

    Non-numeric or non-finite vectors count as wrong-dimension outputs.
    """
    try:
        ok = _is_wellformed(raw_alloc, cfg.periods)
    except (TypeError, ValueError):
        ok = False
    if not ok:
        return -cfg.big_penalty
    return 0.0 - float(abs(np.sum(np.asarray(raw_alloc, dtype=float)) - cfg.budget))


def reward_bonus(alloc, last_alloc, hi, lo, cfg: RewardConfig) -> float:
    hi, lo = set(hi), set(lo)
    if hi & lo:
        raise ConfigError(f"period sets overlap: {sorted(hi & lo)}")
    b = np.asarray(alloc, dtype=float)
    c = np.asarray(last_alloc, dtype=float)
    if b.shape != c.shape:
        raise ShapeError(f"allocation shapes differ: {b.shape} vs {c.shape}")
    for i in hi | lo:
        if not 0 <= i < b.size:
            raise ConfigError(f"period index {i} out of range")
    total = 0.0
    for i in sorted(hi):
        if b[i] > c[i] + cfg.delta:
            total += min(abs(b[i] - c[i]), cfg.tau)
    for i in sorted(lo):
        if b[i] < c[i] - cfg.delta and b[i] > 0:
            total += min(abs(b[i] - c[i]), cfg.tau)
    return float(total)


def split_by_mean(mroi) -> tuple[list[int], list[int]]:
    """Periods strictly above and strictly below the mean marginal ROI."""
    m = np.asarray(mroi, dtype=float)
    mean = m.mean()
    return [int(i) for i in np.flatnonzero(m > mean)], [int(i) for i in np.flatnonzero(m < mean)]


def observe(env: Environment, raw_alloc) -> np.ndarray | None:
    """Marginal ROI for a well-formed vector, entries clipped into [0, B]; else None."""
    try:
        if not _is_wellformed(raw_alloc, env.periods):
            return None
    except (TypeError, ValueError):
        return None
    x = np.clip(np.asarray(raw_alloc, dtype=float), 0.0, env.budget)
    return env_evaluate(env, x)


def reward_total(
    raw_alloc,
    env: Environment,
    last_record: EpisodeRecord | None,
    cfg: RewardConfig,
    mroi: np.ndarray | None = None,
) -> RewardBreakdown:
    """Score one raw agent output; pass ``mroi`` to reuse an observation."""
    constraint = reward_constraint(raw_alloc, cfg)
    if mroi is None:
        mroi = observe(env, raw_alloc)
    if mroi is None:
        return RewardBreakdown.of(0.0, constraint, 0.0)
    env_term = reward_env(mroi, cfg)
    bonus = 0.0
    if last_record is not None and last_record.ok and last_record.allocation.size == cfg.periods:
        hi, lo = split_by_mean(last_record.mroi)
        bonus = reward_bonus(raw_alloc, last_record.allocation, hi, lo, cfg)
    return RewardBreakdown.of(env_term, constraint, bonus)


def score_action(
    env: Environment,
    raw_alloc,
    last_record: EpisodeRecord | None,
    cfg: RewardConfig,
    failure: str | None = None,
) -> tuple[EpisodeRecord, RewardBreakdown]:
    """Evaluate an agent output and package it as an episode record.

    Outputs that cannot be read as a length-T vector are kept with a zero
    mroi vector and a failure tag so downstream consumers still see them.
    """
    if raw_alloc is None:
        raw_alloc = []
    mroi = observe(env, raw_alloc)
    breakdown = reward_total(raw_alloc, env, last_record, cfg, mroi=mroi)
    try:
        arr = np.asarray(raw_alloc, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        arr = np.zeros(0)
    if mroi is None:
        record = EpisodeRecord(arr, np.zeros(arr.size), failure=failure or "malformed_allocation")
    else:
        record = EpisodeRecord(arr, mroi, failure=failure)
    return record, breakdown
