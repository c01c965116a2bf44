"""Budget allocation across time periods under diminishing marginal returns."""

from budgetalloc.envmodel import EnvMeta, Environment, EpisodeRecord, GenSpec, MroiCurve, env_evaluate, env_generate
from budgetalloc.oracle import mroi_variance, solve_bruteforce, solve_equal_marginal
from budgetalloc.reward import RewardConfig, reward_total

__version__ = "0.1.0"

__all__ = [
    "EnvMeta",
    "Environment",
    "EpisodeRecord",
    "GenSpec",
    "MroiCurve",
    "RewardConfig",
    "env_evaluate",
    "env_generate",
    "mroi_variance",
    "reward_total",
    "solve_bruteforce",
    "solve_equal_marginal",
]
