"""Repeated-seed evaluation of the dual-phase loop with persisted metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import stats

from budgetalloc.agents import random_fewshot, run_dual_phase
from budgetalloc.envmodel import Environment, env_evaluate, env_generate, env_load
from budgetalloc.errors import ConfigError, ExperimentError, OutputConflictError
from budgetalloc.harness.baselines import baseline_uniform, make_agent
from budgetalloc.harness.config import ExperimentConfig
from budgetalloc.oracle import mroi_variance
from budgetalloc.textproto import REASONER, CompletionClient

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
TIMINGS_FILE = "timings.csv"
ERRORS_FILE = "errors.json"
CONFIG_FILE = "config.json"
NA = "n/a"


@dataclass(frozen=True)
class MetricRow:
    run_id: str
    seed: int
    episode_index: int
    mroi_variance: float
    reward_total: float
    reward_env: float
    reward_constraint: float
    reward_bonus: float
    uniform_variance: float
    failure: str


METRIC_COLUMNS = tuple(f.name for f in fields(MetricRow))
_INT_COLUMNS = {"seed", "episode_index"}
_STR_COLUMNS = {"run_id", "failure"}


@dataclass
class RunOutput:
    run_id: str
    rows: list[MetricRow]
    wall_time_ms: list[float]
    audit: list


@dataclass
class ExperimentResult:
    rows: list[MetricRow]
    summary: dict
    output_dir: Path | None


def run_id_for(index: int, seed: int) -> str:
    return f"r{index:03d}-s{seed}"


def build_env(cfg: ExperimentConfig, seed: int) -> Environment:
    if cfg.env_file:
        env = env_load(cfg.resolve(cfg.env_file))
        if env.periods != cfg.periods or env.budget != cfg.budget:
            raise ConfigError(
                f"env file has T={env.periods}, B={env.budget}; config says T={cfg.periods}, B={cfg.budget}"
            )
        return env
    return env_generate(seed, cfg.gen_spec())


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def run_repeat(cfg: ExperimentConfig, index: int, seed: int, client: CompletionClient | None = None) -> RunOutput:
    run_id = run_id_for(index, seed)
    env = build_env(cfg, seed)
    fewshot = random_fewshot(env, cfg.fewshot_k, np.random.default_rng(np.random.SeedSequence([seed, 3])))
    audit: list = []
    reasoner = make_agent(cfg.reasoner, REASONER, cfg, env, client, audit)
    optimizer = make_agent(cfg.optimizer, "optimizer", cfg, env, client, audit)
    uniform_var = mroi_variance(env_evaluate(env, baseline_uniform(env.meta)))

    t0 = time.perf_counter()
    traj = run_dual_phase(env, fewshot, reasoner, optimizer, w=cfg.w, n_try=cfg.n_try, reward_cfg=cfg.reward_config())
    elapsed = (time.perf_counter() - t0) * 1000.0

    rows = []
    for s, (rec, rew) in enumerate(zip(traj.episodes, traj.rewards), start=1):
        var = mroi_variance(rec.mroi) if rec.ok else math.nan
        rows.append(MetricRow(
            run_id, seed, s, float(var), rew.total, rew.env, rew.constraint, rew.bonus, float(uniform_var), rec.failure or ""
        ))
    # per-episode timing is not observable from outside the loop; spread evenly
    per_ep = [elapsed / len(rows)] * len(rows)
    return RunOutput(run_id, rows, per_ep, audit)


def _ci(values: np.ndarray) -> dict:
    n = int(values.size)
    if n == 0:
        return {"n": 0, "mean": None, "std": NA, "ci_half_width": NA, "ci_low": NA, "ci_high": NA}
    mean = float(np.mean(values))
    if n < 2:
        return {"n": n, "mean": mean, "std": NA, "ci_half_width": NA, "ci_low": NA, "ci_high": NA}
    sd = float(np.std(values, ddof=1))
    half = float(stats.t.ppf(0.975, n - 1) * sd / math.sqrt(n))
    return {"n": n, "mean": mean, "std": sd, "ci_half_width": half, "ci_low": mean - half, "ci_high": mean + half}


def summarize(rows: list[MetricRow], name: str = "experiment") -> dict:
    """Per-episode mean and 95% t-interval of the marginal-ROI variance across runs."""
    rows = sorted(rows, key=lambda r: (r.run_id, r.episode_index))
    run_ids = sorted({r.run_id for r in rows})
    episodes = sorted({r.episode_index for r in rows})
    per_episode = []
    for s in episodes:
        sel = [r for r in rows if r.episode_index == s]
        var = np.array([r.mroi_variance for r in sel], dtype=float)
        entry = {"episode_index": s, "mroi_variance": _ci(var[np.isfinite(var)])}
        entry["reward_total_mean"] = float(np.mean([r.reward_total for r in sel]))
        entry["failures"] = sum(1 for r in sel if r.failure)
        per_episode.append(entry)
    uniform = np.array([next(r.uniform_variance for r in rows if r.run_id == rid) for rid in run_ids], dtype=float)
    return {
        "name": name,
        "runs": run_ids,
        "episodes": per_episode,
        "uniform_baseline": _ci(uniform),
        "first_episode_mean": per_episode[0]["mroi_variance"]["mean"] if per_episode else None,
        "final_episode_mean": per_episode[-1]["mroi_variance"]["mean"] if per_episode else None,
    }


def rows_to_csv(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(v) for v in asdict(r).values()])
    return buf.getvalue()


def read_metrics(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ConfigError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for rec in reader:
            vals = {}
            for k, v in rec.items():
                if k in _INT_COLUMNS:
                    vals[k] = int(v)
                elif k in _STR_COLUMNS:
                    vals[k] = v
                else:
                    vals[k] = float(v)
            rows.append(MetricRow(**vals))
    return rows


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_outputs(out_dir: Path, files: dict[str, str], overwrite: bool, volatile: dict[str, str] | None = None) -> None:
    """Write ``files`` unless an existing copy differs and ``overwrite`` is off.

    ``volatile`` files (timings) are rewritten without comparison.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    if not overwrite:
        for name, text in files.items():
            p = out_dir / name
            if p.exists() and p.read_text() != text:
                raise OutputConflictError(f"{p} exists with different content; pass --overwrite to replace it")
    for name, text in {**files, **(volatile or {})}.items():
        p = out_dir / name
        if not p.exists() or p.read_text() != text:
            p.write_text(text)


def _timings_csv(outputs: list[RunOutput]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("run_id", "episode_index", "wall_time_ms"))
    for out in outputs:
        for s, ms in enumerate(out.wall_time_ms, start=1):
            writer.writerow((out.run_id, s, f"{ms:.3f}"))
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, output_dir=None, overwrite: bool = False) -> ExperimentResult:
    seeds = cfg.run_seeds()
    client = None
    if "llm" in (cfg.reasoner, cfg.optimizer):
        client = CompletionClient(cfg.endpoint())

    results: dict[int, RunOutput] = {}
    errors = []
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = {i: pool.submit(run_repeat, cfg, i, s, client) for i, s in enumerate(seeds)}
        for i, fut in futures.items():
            try:
                results[i] = fut.result()
            except Exception as exc:
                log.error("repeat %s failed: %s", run_id_for(i, seeds[i]), exc)
                errors.append({"run_id": run_id_for(i, seeds[i]), "seed": seeds[i], "error": type(exc).__name__, "message": str(exc)})

    outputs = [results[i] for i in sorted(results)]
    rows = [r for out in outputs for r in out.rows]
    summary = summarize(rows, cfg.name) if rows else {"name": cfg.name, "runs": [], "episodes": []}

    out_dir = Path(output_dir) if output_dir is not None else None
    if out_dir is not None:
        files = {
            METRICS_FILE: rows_to_csv(rows),
            SUMMARY_FILE: dump_json(summary),
            CONFIG_FILE: dump_json(cfg.to_dict()),
        }
        if errors:
            files[ERRORS_FILE] = dump_json({"failed": errors, "completed": [o.run_id for o in outputs]})
        audits = {f"audit_{o.run_id}.json": dump_json(o.audit) for o in outputs if o.audit}
        write_outputs(out_dir, files, overwrite, volatile={TIMINGS_FILE: _timings_csv(outputs), **audits})
    if errors:
        raise ExperimentError(f"{len(errors)} of {len(seeds)} repeats failed; partial results kept")
    return ExperimentResult(rows, summary, out_dir)


def report(output_dir) -> tuple[dict, bool]:
    """Recompute the summary from persisted rows; also say whether it matches the stored one."""
    out_dir = Path(output_dir)
    rows = read_metrics(out_dir / METRICS_FILE)
    name = "experiment"
    stored = None
    if (out_dir / SUMMARY_FILE).exists():
        stored = json.loads((out_dir / SUMMARY_FILE).read_text())
        name = stored.get("name", name)
    summary = summarize(rows, name)
    return summary, stored is not None and json.loads(dump_json(summary)) == stored


def format_summary(summary: dict) -> str:
    lines = [f"{summary['name']}: {len(summary['runs'])} run(s)"]
    lines.append(f"{'episode':>7}  {'mean var':>12}  {'95% CI':>27}  {'reward':>10}")
    for e in summary["episodes"]:
        v = e["mroi_variance"]
        ci = NA if v["ci_low"] == NA else f"[{v['ci_low']:.6f}, {v['ci_high']:.6f}]"
        mean = "nan" if v["mean"] is None else f"{v['mean']:.6f}"
        lines.append(f"{e['episode_index']:>7}  {mean:>12}  {ci:>27}  {e['reward_total_mean']:>10.4f}")
    u = summary.get("uniform_baseline")
    if u and u.get("mean") is not None:
        lines.append(f"uniform baseline variance: {u['mean']:.6f}")
    return "\n".join(lines)
