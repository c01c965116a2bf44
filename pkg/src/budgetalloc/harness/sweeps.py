"""Period-count and reference-refresh sweeps."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from budgetalloc.errors import ConfigError
from budgetalloc.grpo import LOG_COLUMNS, save_policy, train
from budgetalloc.harness.config import ExperimentConfig
from budgetalloc.harness.experiment import _fmt, dump_json, run_experiment, write_outputs

log = logging.getLogger(__name__)

FINAL_WINDOW = 50
STATIC = "static"
NO_KL = "beta=0"


def run_period_sweep(cfg: ExperimentConfig, periods: list[int], output_dir=None, overwrite: bool = False) -> list[dict]:
    if not periods:
        raise ConfigError("period list is empty")
    if len(set(periods)) != len(periods):
        raise ConfigError(f"duplicate entries in period list {periods}")
    if any(t < 2 for t in periods):
        raise ConfigError(f"every T must be >= 2, got {periods}")
    if cfg.env_file:
        raise ConfigError("period sweeps need generated environments, not env_file")
    rows = []
    for t in periods:
        sub = Path(output_dir) / f"T{t}" if output_dir is not None else None
        res = run_experiment(cfg.replace(periods=t, name=f"{cfg.name}-T{t}"), sub, overwrite)
        s = res.summary
        final = s["episodes"][-1]["mroi_variance"]
        rows.append({
            "periods": t,
            "first_episode_mean": s["first_episode_mean"],
            "final_episode_mean": s["final_episode_mean"],
            "final_ci_half_width": final["ci_half_width"],
            "uniform_mean": s["uniform_baseline"]["mean"],
            "beats_uniform": bool(s["final_episode_mean"] < s["uniform_baseline"]["mean"]),
        })
    if output_dir is not None:
        write_outputs(Path(output_dir), {"period_sweep.csv": _table_csv(rows), "period_sweep.json": dump_json(rows)}, overwrite)
    return rows


def _table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if rows:
        writer.writerow(rows[0].keys())
        for r in rows:
            writer.writerow([_fmt(v) for v in r.values()])
    return buf.getvalue()


def train_log_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in LOG_COLUMNS])
    return buf.getvalue()


def window_means(log_rows: list[dict], width: int = FINAL_WINDOW) -> tuple[float, float]:
    """Mean best-record variance over the first and last ``width`` iterations."""
    v = np.array([r["best_variance"] for r in log_rows], dtype=float)
    if v.size == 0:
        raise ConfigError("training log is empty")
    width = min(width, v.size)
    return float(np.nanmean(v[:width])), float(np.nanmean(v[-width:]))


def run_training(cfg: ExperimentConfig, seed: int, output_dir=None, overwrite: bool = False):
    policy, rows = train(cfg.grpo_config(), cfg.gen_spec(), seed, cfg.reward_config())
    if output_dir is not None:
        out = Path(output_dir)
        write_outputs(out, {"train_log.csv": train_log_csv(rows), "config.json": dump_json(cfg.to_dict())}, overwrite)
        save_policy(policy, out / "policy.json")
    return policy, rows


@dataclass(frozen=True)
class Arm:
    label: str
    refresh_period: int | None
    kl_beta: float


def refresh_arms(cfg: ExperimentConfig, m_list: list[int | None], beta0: bool = False) -> list[Arm]:
    arms = [Arm(STATIC if m is None else f"M={m}", m, cfg.kl_beta) for m in m_list]
    if beta0:
        arms.append(Arm(NO_KL, cfg.refresh_period, 0.0))
    labels = [a.label for a in arms]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate sweep arms: {labels}")
    return arms


def _ordering_check(per_seed: dict[str, dict[int, float]], seeds, primary: str) -> dict | None:
    """Does the refreshed arm beat the static one, with the KL-free arm worst?"""
    if not {primary, STATIC, NO_KL} <= per_seed.keys():
        return None
    holds = []
    for s in seeds:
        m, st, b0 = per_seed[primary][s], per_seed[STATIC][s], per_seed[NO_KL][s]
        holds.append(bool(m <= st and b0 >= m and b0 >= st))
    majority = sum(holds) > len(holds) / 2
    return {
        "arms": [primary, STATIC, NO_KL],
        "per_seed": dict(zip([str(s) for s in seeds], holds)),
        "holds_for_majority": majority,
        "deviation_flagged": not majority,
        "note": "" if majority else (
            f"expected {primary} <= {STATIC} <= {NO_KL} in final-window variance; "
            f"held for {sum(holds)} of {len(holds)} seeds"
        ),
    }


def run_refresh_sweep(
    cfg: ExperimentConfig,
    m_list: list[int | None],
    seeds: list[int],
    beta0: bool = False,
    output_dir=None,
    overwrite: bool = False,
) -> dict:
    """Train once per (arm, seed) and compare final-window variances."""
    if not seeds:
        raise ConfigError("refresh sweep needs at least one seed")
    arms = refresh_arms(cfg, m_list, beta0)
    jobs = [(a, s) for a in arms for s in seeds]

    def job(arm_seed):
        arm, s = arm_seed
        sub = cfg.replace(refresh_period=arm.refresh_period, kl_beta=arm.kl_beta)
        _, rows = train(sub.grpo_config(), sub.gen_spec(), s, sub.reward_config())
        return rows

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        logs = list(pool.map(job, jobs))

    table = []
    per_seed: dict[str, dict[int, float]] = {}
    files = {}
    for (arm, s), rows in zip(jobs, logs):
        first, final = window_means(rows)
        table.append({"arm": arm.label, "seed": s, "first_window_variance": first, "final_window_variance": final})
        per_seed.setdefault(arm.label, {})[s] = final
        files[f"train_{arm.label.replace('=', '')}_s{s}.csv"] = train_log_csv(rows)

    arms_summary = []
    for arm in arms:
        finals = np.array([per_seed[arm.label][s] for s in seeds])
        arms_summary.append({
            "arm": arm.label,
            "refresh_period": arm.refresh_period,
            "kl_beta": arm.kl_beta,
            "final_window_mean": float(finals.mean()),
        })
    primary = f"M={cfg.refresh_period}" if cfg.refresh_period in m_list else next(
        (f"M={m}" for m in m_list if m is not None), None
    )
    ordering = _ordering_check(per_seed, seeds, primary) if primary else None
    if ordering and ordering["deviation_flagged"]:
        log.warning("refresh sweep ordering deviation: %s", ordering["note"])
    result = {"arms": arms_summary, "runs": table, "ordering": ordering, "final_window": FINAL_WINDOW}
    if output_dir is not None:
        files["refresh_sweep.csv"] = _table_csv(table)
        files["refresh_sweep.json"] = dump_json(result)
        write_outputs(Path(output_dir), files, overwrite)
    return result
