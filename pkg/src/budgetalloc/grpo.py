"""GRPO with a periodically refreshed KL reference, on a compact simplex policy.

The policy draws a latent ``z ~ N(phi @ w, diag(sigma^2))`` per period and
allocates ``B * softmax(z)``.  Everything the group-relative update needs
(sampling, log-densities, the clipped surrogate, the Gaussian KL and their
gradients) is closed form, so one training iteration is a few numpy calls.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from budgetalloc.agents import SlidingWindow, random_fewshot
from budgetalloc.envmodel import EnvMeta, Environment, EpisodeRecord, GenSpec, env_generate
from budgetalloc.errors import ConfigError, NumericError, ShapeError
from budgetalloc.oracle import mroi_variance
from budgetalloc.reward import RewardBreakdown, RewardConfig, score_action

FEATURE_MAP = "window-summary-v1"
FEATURE_NAMES = ("log_share", "mean_reward", "window_deviation", "last_deviation")
EPS_MEAN = 1e-6
MIN_SHARE = 1e-3
LOG_2PI = math.log(2 * math.pi)


def window_features(history: Sequence[EpisodeRecord], meta: EnvMeta) -> np.ndarray:
    """Per-period feature matrix of shape (T, 4) summarizing a window.

    Columns: log of the latest allocation's share relative to uniform, the
    window-mean marginal ROI, its deviation from the grand mean (relative),
    and the same deviation for the latest record alone.
    """
    T, B = meta.periods, meta.budget
    valid = [r for r in history if r.ok and r.allocation.size == T]
    if not valid:
        return np.column_stack([np.zeros(T), np.zeros(T), np.zeros(T), np.zeros(T)])
    r_hat = np.mean([r.mroi for r in valid], axis=0)
    last = valid[-1]
    share = np.maximum(last.allocation * T / B, MIN_SHARE)
    dev_w = (r_hat - r_hat.mean()) / max(r_hat.mean(), EPS_MEAN)
    dev_l = (last.mroi - last.mroi.mean()) / max(last.mroi.mean(), EPS_MEAN)
    return np.column_stack([np.log(share), r_hat, dev_w, dev_l])


def softmax_allocation(z: np.ndarray, budget: float) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return budget * e / e.sum(axis=-1, keepdims=True)


@dataclass
class SimplexPolicy:
    """Latent-Gaussian policy over allocations of ``budget`` across ``periods``."""

    periods: int
    budget: float
    mean_weights: np.ndarray
    log_std: np.ndarray
    feature_map: str = FEATURE_MAP

    def __post_init__(self):
        self.mean_weights = np.asarray(self.mean_weights, dtype=float).copy()
        self.log_std = np.asarray(self.log_std, dtype=float).copy()
        if self.mean_weights.shape != (len(FEATURE_NAMES),):
            raise ShapeError(f"mean_weights must have shape ({len(FEATURE_NAMES)},)")
        if self.log_std.shape != (self.periods,):
            raise ShapeError(f"log_std must have shape ({self.periods},)")

    @classmethod
    def initial(cls, periods: int, budget: float, init_std: float = 0.8) -> SimplexPolicy:
        # start by repeating the latest allocation
        w = np.zeros(len(FEATURE_NAMES))
        w[0] = 1.0
        return cls(periods, budget, w, np.full(periods, math.log(init_std)))

    @property
    def meta(self) -> EnvMeta:
        return EnvMeta(self.periods, self.budget)

    def mean(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.mean_weights

    def sample(self, feats: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Latent draw and the feasible allocation it maps to."""
        z = self.mean(feats) + np.exp(self.log_std) * rng.standard_normal(self.periods)
        return z, softmax_allocation(z, self.budget)

    def log_prob(self, z: np.ndarray, feats: np.ndarray) -> np.ndarray:
        """Latent log-density; ``z`` may be (T,) or (G, T)."""
        sigma = np.exp(self.log_std)
        u = (z - self.mean(feats)) / sigma
        return np.sum(-0.5 * u**2 - self.log_std - 0.5 * LOG_2PI, axis=-1)

    def grad_log_prob(self, z: np.ndarray, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ``log_prob`` w.r.t. (mean_weights, log_std), batched over rows of ``z``."""
        z = np.atleast_2d(z)
        var = np.exp(2 * self.log_std)
        resid = z - self.mean(feats)
        g_w = (resid / var) @ feats
        g_s = resid**2 / var - 1.0
        return g_w, g_s

    def act(self, history, meta: EnvMeta) -> np.ndarray:
        """Deterministic action: the allocation at the latent mean."""
        self._check_meta(meta)
        return softmax_allocation(self.mean(window_features(history, meta)), meta.budget)

    def _check_meta(self, meta: EnvMeta):
        if meta.periods != self.periods:
            raise ShapeError(f"policy trained for T={self.periods}, environment has T={meta.periods}")

    def copy(self) -> SimplexPolicy:
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "feature_map": self.feature_map,
            "features": list(FEATURE_NAMES),
            "periods": self.periods,
            "budget": self.budget,
            "mean_weights": self.mean_weights.tolist(),
            "log_std": self.log_std.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> SimplexPolicy:
        if obj.get("feature_map") != FEATURE_MAP:
            raise ConfigError(f"unsupported feature map {obj.get('feature_map')!r}")
        return cls(int(obj["periods"]), float(obj["budget"]), obj["mean_weights"], obj["log_std"])


def save_policy(policy: SimplexPolicy, path) -> None:
    Path(path).write_text(json.dumps(policy.to_dict(), indent=2) + "\n")


def load_policy(path) -> SimplexPolicy:
    return SimplexPolicy.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 3
    clip_eps: float = 0.1
    kl_beta: float = 0.04
    lr: float = 1e-2
    iterations: int = 500
    refresh_period: int | None = 60
    batch_prompts: int = 8
    gamma: float = 1.0
    tries_per_env: int = 10
    preference_scale: float = 1.0
    update_epochs: int = 1
    window: int = 3
    fewshot_k: int = 3
    init_std: float = 0.8

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2, got {self.group_size}")
        if not 0 < self.clip_eps < 1:
            raise ConfigError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        if self.kl_beta < 0:
            raise ConfigError(f"kl_beta must be >= 0, got {self.kl_beta}")
        if self.refresh_period is not None and self.refresh_period < 1:
            raise ConfigError(f"refresh_period must be >= 1 or None, got {self.refresh_period}")
        if self.iterations < 0 or self.batch_prompts < 1 or self.tries_per_env < 1:
            raise ConfigError("iterations >= 0, batch_prompts >= 1 and tries_per_env >= 1 required")
        if self.update_epochs < 1 or self.window < 1 or self.fewshot_k < 1:
            raise ConfigError("update_epochs, window and fewshot_k must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")


@dataclass
class TrainerState:
    policy: SimplexPolicy
    policy_old: SimplexPolicy
    reference: SimplexPolicy
    iteration: int = 0
    cfg: GrpoConfig = field(default_factory=GrpoConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)

    @classmethod
    def start(cls, policy: SimplexPolicy, cfg: GrpoConfig, reward: RewardConfig | None = None) -> TrainerState:
        return cls(policy, policy.copy(), policy.copy(), 0, cfg, reward or RewardConfig())


# --- objective pieces ---------------------------------------------------------


def group_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ConfigError(f"advantage normalization needs a group of >= 2, got {r.size}")
    sigma = r.std()
    if sigma < 1e-8:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


def clipped_surrogate(ratio, advantage, eps: float):
    ratio = np.asarray(ratio, dtype=float)
    if np.any(~(ratio > 0)):
        raise NumericError(f"likelihood ratio must be positive, got {ratio}")
    out = np.minimum(ratio * advantage, np.clip(ratio, 1 - eps, 1 + eps) * advantage)
    return float(out) if out.ndim == 0 else out


def _gaussian_kl(policy: SimplexPolicy, reference: SimplexPolicy, feats: np.ndarray) -> float:
    mu, mu_r = policy.mean(feats), reference.mean(feats)
    var, var_r = np.exp(2 * policy.log_std), np.exp(2 * reference.log_std)
    return float(np.sum(reference.log_std - policy.log_std + (var + (mu - mu_r) ** 2) / (2 * var_r) - 0.5))


def kl_to_reference(policy: SimplexPolicy, reference: SimplexPolicy, state_batch: Sequence[np.ndarray]) -> float:
    """Mean closed-form KL(policy || reference) over feature matrices."""
    if policy.periods != reference.periods or policy.feature_map != reference.feature_map:
        raise ShapeError("policies disagree on periods or feature map")
    if len(state_batch) == 0:
        return 0.0
    return float(np.mean([_gaussian_kl(policy, reference, f) for f in state_batch]))


def _kl_grad(policy, reference, feats):
    mu, mu_r = policy.mean(feats), reference.mean(feats)
    var, var_r = np.exp(2 * policy.log_std), np.exp(2 * reference.log_std)
    return ((mu - mu_r) / var_r) @ feats, var / var_r - 1.0


@dataclass(frozen=True)
class SampledGroup:
    """One prompt's group: features, latent draws and normalized advantages."""

    feats: np.ndarray
    latents: np.ndarray
    advantages: np.ndarray
    old_logp: np.ndarray


def surrogate_objective(policy: SimplexPolicy, group: SampledGroup, eps: float):
    """Mean clipped surrogate over the group and its analytic gradient."""
    logp = policy.log_prob(group.latents, group.feats)
    ratio = np.exp(logp - group.old_logp)
    adv = group.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * adv
    value = float(np.mean(np.minimum(unclipped, clipped)))
    active = unclipped <= clipped
    coef = np.where(active, adv * ratio, 0.0) / adv.size
    g_w, g_s = policy.grad_log_prob(group.latents, group.feats)
    return value, coef @ g_w, coef @ g_s


def grpo_loss(policy, reference, groups: Sequence[SampledGroup], cfg: GrpoConfig):
    """``-mu * L_adv + beta * KL`` averaged over prompts, with gradients."""
    n = len(groups)
    loss = 0.0
    g_w = np.zeros_like(policy.mean_weights)
    g_s = np.zeros_like(policy.log_std)
    for grp in groups:
        v, dw, ds = surrogate_objective(policy, grp, cfg.clip_eps)
        loss -= cfg.preference_scale * v / n
        g_w -= cfg.preference_scale * dw / n
        g_s -= cfg.preference_scale * ds / n
        if cfg.kl_beta > 0:
            loss += cfg.kl_beta * _gaussian_kl(policy, reference, grp.feats) / n
            kw, ks = _kl_grad(policy, reference, grp.feats)
            g_w += cfg.kl_beta * kw / n
            g_s += cfg.kl_beta * ks / n
    return loss, g_w, g_s


# --- training -----------------------------------------------------------------


@dataclass(frozen=True)
class Prompt:
    """One training state: a live window on one environment."""

    window: tuple[EpisodeRecord, ...]
    env: Environment

    @property
    def last_record(self) -> EpisodeRecord:
        return self.window[-1]


@dataclass(frozen=True)
class StepInfo:
    iteration: int
    mean_reward: float
    best_variance: float
    kl: float
    kl_penalty: float
    loss: float
    refreshed: bool
    all_malformed: bool


def _is_feasible(b: RewardBreakdown) -> bool:
    return b.constraint > -1e-9


def pick_best(rewards: Sequence[RewardBreakdown]) -> int:
    """Highest total reward among feasible samples, else overall; first wins ties."""
    feasible = [i for i, r in enumerate(rewards) if _is_feasible(r)]
    pool = feasible or list(range(len(rewards)))
    return max(pool, key=lambda i: (rewards[i].total, -i))


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def grpo_step(state: TrainerState, prompts: Sequence[Prompt] | Prompt, seed: int = 0):
    """One sampling/update cycle. Returns (state, best records per prompt, StepInfo).

    Group member ``i`` of prompt ``q`` draws from the RNG stream keyed by
    ``(seed, iteration, q, i)``, so results do not depend on evaluation order.
    """
    if isinstance(prompts, Prompt):
        prompts = [prompts]
    cfg = state.cfg
    state.policy_old = state.policy.copy()
    old = state.policy_old

    groups: list[SampledGroup] = []
    best_records: list[EpisodeRecord] = []
    all_rewards: list[float] = []
    n_malformed = 0
    n_samples = 0
    for q, prompt in enumerate(prompts):
        meta = prompt.env.meta
        old._check_meta(meta)
        rcfg = replace(state.reward, budget=meta.budget, periods=meta.periods)
        feats = window_features(prompt.window, meta)
        latents, records, rewards = [], [], []
        for i in range(cfg.group_size):
            z, action = old.sample(feats, _rng(seed, state.iteration, q, i))
            rec, rb = score_action(prompt.env, action, prompt.last_record, rcfg)
            latents.append(z)
            records.append(rec)
            rewards.append(rb)
            n_malformed += int(not rec.ok)
            n_samples += 1
        totals = np.array([r.total for r in rewards])
        all_rewards.extend(totals.tolist())
        latents = np.array(latents)
        groups.append(SampledGroup(feats, latents, group_advantages(totals), old.log_prob(latents, feats)))
        best_records.append(records[pick_best(rewards)])

    loss = 0.0
    for _ in range(cfg.update_epochs):
        loss, g_w, g_s = grpo_loss(state.policy, state.reference, groups, cfg)
        state.policy.mean_weights = state.policy.mean_weights - cfg.lr * g_w
        state.policy.log_std = state.policy.log_std - cfg.lr * g_s

    state.iteration += 1
    feats_batch = [g.feats for g in groups]
    kl = kl_to_reference(state.policy, state.reference, feats_batch)
    refreshed = False
    if cfg.refresh_period is not None and state.iteration % cfg.refresh_period == 0:
        state.reference = state.policy.copy()
        refreshed = True
    best_var = float(np.mean([mroi_variance(r.mroi) for r in best_records if r.ok] or [np.nan]))
    info = StepInfo(
        iteration=state.iteration,
        mean_reward=float(np.mean(all_rewards)),
        best_variance=best_var,
        kl=kl,
        kl_penalty=cfg.kl_beta * kl,
        loss=float(loss),
        refreshed=refreshed,
        all_malformed=n_malformed == n_samples,
    )
    return state, best_records, info


LOG_COLUMNS = (
    "iteration",
    "env_resampled",
    "mean_reward",
    "best_variance",
    "kl",
    "kl_penalty",
    "loss",
    "refreshed",
)


def _env_seed(seed: int, stream: int, env_index: int) -> int:
    return int(np.random.SeedSequence([seed, 1, stream, env_index]).generate_state(1)[0])


def train(
    cfg: GrpoConfig,
    gen_spec: GenSpec,
    seed: int,
    reward_cfg: RewardConfig | None = None,
    policy: SimplexPolicy | None = None,
):
    """Run group-relative policy optimization with reference refresh over freshly generated environments.

    ``batch_prompts`` independent streams each hold one environment and its
    live window; every ``tries_per_env`` iterations all streams switch to
    new environments.  Returns the trained policy and a list of log rows.
    """
    policy = policy.copy() if policy is not None else SimplexPolicy.initial(gen_spec.periods, gen_spec.budget, cfg.init_std)
    state = TrainerState.start(policy, cfg, reward_cfg)
    log: list[dict] = []
    windows: list[SlidingWindow] = []
    envs: list[Environment] = []
    for it in range(cfg.iterations):
        resample = it % cfg.tries_per_env == 0
        if resample:
            env_index = it // cfg.tries_per_env
            envs, windows = [], []
            for j in range(cfg.batch_prompts):
                env = env_generate(_env_seed(seed, j, env_index), gen_spec)
                fewshot = random_fewshot(env, cfg.fewshot_k, _rng(seed, 2, j, env_index))
                envs.append(env)
                windows.append(SlidingWindow(cfg.window, fewshot.records[-cfg.window:]))
        prompts = [Prompt(tuple(w.records), e) for w, e in zip(windows, envs)]
        state, best, info = grpo_step(state, prompts, seed)
        for w, rec in zip(windows, best):
            w.push(rec)
        log.append({
            "iteration": info.iteration,
            "env_resampled": int(resample),
            "mean_reward": info.mean_reward,
            "best_variance": info.best_variance,
            "kl": info.kl,
            "kl_penalty": info.kl_penalty,
            "loss": info.loss,
            "refreshed": int(info.refreshed),
        })
    return state.policy, log
