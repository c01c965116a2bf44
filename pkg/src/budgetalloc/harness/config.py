"""Experiment configuration stored as a flat JSON document.

Every training and reward hyperparameter is a named key.  Unknown keys are
rejected so that typos surface at load time instead of silently falling
back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from budgetalloc.envmodel import GenSpec
from budgetalloc.errors import ConfigError
from budgetalloc.grpo import GrpoConfig
from budgetalloc.reward import RewardConfig
from budgetalloc.textproto import CompletionEndpoint

AGENT_KINDS = ("heuristic", "policy", "llm", "oracle", "uniform")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    output_dir: str = "runs/experiment"

    # environment source: generated from `seed` unless env_file is set
    env_file: str | None = None
    env_kind: str = "poly"
    periods: int = 6
    budget: float = 6.0

    reasoner: str = "heuristic"
    optimizer: str = "heuristic"
    policy_path: str | None = None
    eta: float = 0.25
    step_gain: float = 0.1

    n_try: int = 10
    w: int = 3
    fewshot_k: int = 3
    repeats: int = 5
    seed: int = 0
    seeds: tuple[int, ...] | None = None
    workers: int = 1

    # reward
    alpha: float = 0.5
    big_penalty: float = 100.0
    delta: float = 0.2
    tau: float = 0.2

    # policy optimization
    iterations: int = 500
    refresh_period: int | None = 60
    batch_prompts: int = 8
    group_size: int = 3
    kl_beta: float = 0.04
    clip_eps: float = 0.1
    lr: float = 1e-2
    preference_scale: float = 1.0
    gamma: float = 1.0
    init_std: float = 0.8
    train_seed: int = 0

    # text-completion endpoint
    endpoint_url: str | None = None
    model_name: str = "model"
    max_completion: int = 500
    temperature: float = 0.0
    retries: int = 2
    timeout: float = 30.0
    auth_token_env_var: str | None = None
    max_in_flight: int = 4

    source_dir: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.seeds is not None:
            object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.seeds is not None and len(self.seeds) != self.repeats:
            raise ConfigError(f"{len(self.seeds)} seeds listed for {self.repeats} repeats")
        if self.n_try < 1 or self.w < 1 or self.fewshot_k < 1 or self.workers < 1:
            raise ConfigError("n_try, w, fewshot_k and workers must all be >= 1")
        for phase in ("reasoner", "optimizer"):
            kind = getattr(self, phase)
            if kind not in AGENT_KINDS:
                raise ConfigError(f"{phase} must be one of {AGENT_KINDS}, got {kind!r}")
            if kind == "policy" and not self.policy_path:
                raise ConfigError(f"{phase}=policy requires policy_path")
            if kind == "llm" and not self.endpoint_url:
                raise ConfigError(f"{phase}=llm requires endpoint_url")
        for key in ("policy_path", "env_file"):
            path = self.resolve(getattr(self, key))
            if path is not None and not path.is_file():
                raise ConfigError(f"{key} does not exist: {path}")
        # constructing the sub-configs runs their own validation
        self.reward_config()
        self.grpo_config()

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self.source_dir is not None:
            p = Path(self.source_dir) / p
        return p

    def run_seeds(self) -> tuple[int, ...]:
        if self.seeds is not None:
            return self.seeds
        return tuple(self.seed + r for r in range(self.repeats))

    def gen_spec(self) -> GenSpec:
        return GenSpec(periods=self.periods, budget=self.budget, kind=self.env_kind)

    def reward_config(self) -> RewardConfig:
        return RewardConfig(
            alpha=self.alpha,
            big_penalty=self.big_penalty,
            delta=self.delta,
            tau=self.tau,
            budget=self.budget,
            periods=self.periods,
        )

    def grpo_config(self) -> GrpoConfig:
        return GrpoConfig(
            group_size=self.group_size,
            clip_eps=self.clip_eps,
            kl_beta=self.kl_beta,
            lr=self.lr,
            iterations=self.iterations,
            refresh_period=self.refresh_period,
            batch_prompts=self.batch_prompts,
            gamma=self.gamma,
            tries_per_env=self.n_try,
            preference_scale=self.preference_scale,
            window=self.w,
            fewshot_k=self.fewshot_k,
            init_std=self.init_std,
        )

    def endpoint(self) -> CompletionEndpoint:
        if not self.endpoint_url:
            raise ConfigError("no endpoint_url configured")
        return CompletionEndpoint(
            base_url=self.endpoint_url,
            model_name=self.model_name,
            timeout=self.timeout,
            max_tokens=self.max_completion,
            temperature=self.temperature,
            retries=self.retries,
            auth_token_env_var=self.auth_token_env_var,
            max_in_flight=self.max_in_flight,
        )

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "source_dir":
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


def _field_names() -> set[str]:
    return {f.name for f in dataclasses.fields(ExperimentConfig)} - {"source_dir"}


def config_from_dict(obj: dict, source_dir: str | None = None) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(obj) - _field_names())
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    try:
        return ExperimentConfig(**obj, source_dir=source_dir)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return config_from_dict(obj, source_dir=str(path.parent))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
