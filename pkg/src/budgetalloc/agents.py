"""Dual-phase allocation loop and the heuristic agents that drive it.

An agent is any object with ``act(history, meta)`` returning a raw
allocation (or a parse-failure object for text agents).  Agents only see
episode feedback, never curve parameters.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from budgetalloc.envmodel import EnvMeta, Environment, EpisodeRecord, env_evaluate
from budgetalloc.errors import ConfigError, ShapeError
from budgetalloc.reward import RewardBreakdown, RewardConfig, score_action

EPS_GAIN = 1e-6


class Agent(Protocol):
    def act(self, history: Sequence[EpisodeRecord], meta: EnvMeta): ...


@dataclass(frozen=True)
class FewShotSet:
    records: tuple[EpisodeRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise ConfigError("few-shot set needs at least one record")
        sizes = {r.allocation.size for r in self.records}
        if len(sizes) != 1:
            raise ShapeError(f"few-shot records disagree on T: {sorted(sizes)}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


class SlidingWindow:
    """Most recent ``capacity`` episode records, oldest first."""

    def __init__(self, capacity: int, records: Iterable[EpisodeRecord] = ()):
        if capacity < 1:
            raise ConfigError(f"window capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._buf: deque[EpisodeRecord] = deque(records, maxlen=capacity)

    def push(self, record: EpisodeRecord) -> None:
        self._buf.append(record)

    @property
    def records(self) -> list[EpisodeRecord]:
        return list(self._buf)

    @property
    def latest(self) -> EpisodeRecord:
        return self._buf[-1]

    def __len__(self):
        return len(self._buf)

    def __iter__(self):
        return iter(self._buf)


@dataclass
class Trajectory:
    env_id: str
    episodes: list[EpisodeRecord] = field(default_factory=list)
    rewards: list[RewardBreakdown] = field(default_factory=list)

    def __len__(self):
        return len(self.episodes)


def renormalize(x: np.ndarray, budget: float) -> np.ndarray:
    """Floor at zero and scale to sum to ``budget``; uniform if nothing is left."""
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    s = x.sum()
    if not s > 0:
        return np.full(x.size, budget / x.size)
    out = x * (budget / s)
    # push the rounding residue onto the largest entry
    out[np.argmax(out)] += budget - out.sum()
    return out


def _valid(records: Iterable[EpisodeRecord], periods: int) -> list[EpisodeRecord]:
    return [r for r in records if r.ok and r.allocation.size == periods]


def reasoner_heuristic(fewshot: FewShotSet | Sequence[EpisodeRecord], meta: EnvMeta, eta: float = 0.25) -> np.ndarray:
    """Move a fraction ``eta`` of the weakest period's budget to the strongest one."""
    if not 0 < eta < 1:
        raise ConfigError(f"eta must lie in (0, 1), got {eta}")
    records = _valid(fewshot, meta.periods)
    if not records:
        raise ConfigError("reasoner needs at least one well-formed record")
    last = records[-1]
    b = last.allocation.astype(float).copy()
    m = last.mroi
    if np.all(m == m[0]):
        return b
    i_low, i_high = int(np.argmin(m)), int(np.argmax(m))
    moved = eta * b[i_low]
    b[i_low] -= moved
    b[i_high] += moved
    if abs(b.sum() - meta.budget) > 0 or np.any(b < 0):
        b = renormalize(b, meta.budget)
    return b


def optimizer_heuristic(window: SlidingWindow | Sequence[EpisodeRecord], meta: EnvMeta, step_gain: float = 0.1) -> np.ndarray:
    """Nudge the latest allocation towards periods whose average reward is above the mean."""
    records = list(window)
    if not records:
        raise ConfigError("optimizer needs a non-empty window")
    valid = _valid(records, meta.periods)
    if not valid:
        return np.full(meta.periods, meta.budget / meta.periods)
    r_hat = np.mean([r.mroi for r in valid], axis=0)
    g = r_hat.mean()
    b = valid[-1].allocation.astype(float)
    if np.all(r_hat == r_hat[0]):
        return b.copy()
    step = step_gain * meta.budget * (r_hat - g) / max(g, EPS_GAIN)
    return renormalize(b + step, meta.budget)


@dataclass(frozen=True)
class HeuristicReasoner:
    eta: float = 0.25

    def act(self, history, meta):
        return reasoner_heuristic(history, meta, self.eta)


@dataclass(frozen=True)
class HeuristicOptimizer:
    step_gain: float = 0.1

    def act(self, history, meta):
        return optimizer_heuristic(history, meta, self.step_gain)


def _agent_output(agent, history, meta):
    """Call an agent and split its output into (raw vector, failure tag)."""
    out = agent.act(list(history), meta)
    reason = getattr(out, "reason", None)
    if reason is not None:
        return None, reason
    return out, None


def run_dual_phase(
    env: Environment,
    fewshot: FewShotSet,
    reasoner,
    optimizer,
    w: int = 3,
    n_try: int = 10,
    reward_cfg: RewardConfig | None = None,
) -> Trajectory:
    """Reasoner picks episode 1 from the few-shot set; the optimizer refines from a sliding window."""
    if n_try < 1:
        raise ConfigError(f"n_try must be >= 1, got {n_try}")
    if w < 1:
        raise ConfigError(f"window size must be >= 1, got {w}")
    cfg = reward_cfg or RewardConfig.for_env(env)
    meta = env.meta
    traj = Trajectory(env.env_id)

    raw, failure = _agent_output(reasoner, fewshot.records, meta)
    record, breakdown = score_action(env, raw, fewshot.records[-1], cfg, failure)
    traj.episodes.append(record)
    traj.rewards.append(breakdown)

    tail = list(fewshot.records[-(w - 1):]) if w > 1 else []
    window = SlidingWindow(w, tail + [record])
    for _ in range(1, n_try):
        raw, failure = _agent_output(optimizer, window.records, meta)
        record, breakdown = score_action(env, raw, window.latest, cfg, failure)
        traj.episodes.append(record)
        traj.rewards.append(breakdown)
        window.push(record)
    return traj


def random_fewshot(env: Environment, k: int, rng: np.random.Generator) -> FewShotSet:
    """``k`` allocations drawn uniformly on the simplex, scored by the environment."""
    if k < 1:
        raise ConfigError(f"few-shot size must be >= 1, got {k}")
    records = []
    for _ in range(k):
        b = rng.dirichlet(np.ones(env.periods)) * env.budget
        records.append(EpisodeRecord(b, env_evaluate(env, b)))
    return FewShotSet(tuple(records))
