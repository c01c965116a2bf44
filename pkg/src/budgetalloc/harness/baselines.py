"""Reference agents and the factory that builds agents from a configuration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from budgetalloc.agents import HeuristicOptimizer, HeuristicReasoner
from budgetalloc.envmodel import EnvMeta, Environment
from budgetalloc.errors import ConfigError
from budgetalloc.grpo import load_policy
from budgetalloc.oracle import solve_equal_marginal
from budgetalloc.textproto import OPTIMIZER, REASONER, CompletionClient, LlmAgent


def baseline_uniform(meta: EnvMeta) -> np.ndarray:
    return np.full(meta.periods, meta.budget / meta.periods)


class UniformAgent:
    def act(self, history, meta):
        return baseline_uniform(meta)


@dataclass
class OracleAgent:
    """Cheating baseline that knows the environment and plays its optimum."""

    env: Environment

    def __post_init__(self):
        self._alloc = solve_equal_marginal(self.env).allocation

    def act(self, history, meta):
        return self._alloc.copy()


def make_agent(kind: str, phase: str, cfg, env: Environment, client: CompletionClient | None = None, audit=None):
    if kind == "heuristic":
        return HeuristicReasoner(cfg.eta) if phase == REASONER else HeuristicOptimizer(cfg.step_gain)
    if kind == "uniform":
        return UniformAgent()
    if kind == "oracle":
        return OracleAgent(env)
    if kind == "policy":
        return load_policy(cfg.resolve(cfg.policy_path))
    if kind == "llm":
        if client is None:
            raise ConfigError("llm agent needs a completion client")
        return LlmAgent(client, REASONER if phase == REASONER else OPTIMIZER, audit if audit is not None else [])
    raise ConfigError(f"unknown agent kind {kind!r}")
