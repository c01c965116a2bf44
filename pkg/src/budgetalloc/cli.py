"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from budgetalloc.envmodel import GenSpec, env_evaluate, env_generate, env_load, env_save, env_to_dict, tabulate
from budgetalloc.errors import BudgetAllocError
from budgetalloc.harness.config import ExperimentConfig, load_config
from budgetalloc.harness.experiment import dump_json, format_summary, report, run_experiment
from budgetalloc.harness.sweeps import run_period_sweep, run_refresh_sweep, run_training, window_means
from budgetalloc.oracle import mroi_variance, solve_bruteforce, solve_equal_marginal

log = logging.getLogger("budgetalloc")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "workers", None):
        cfg = cfg.replace(workers=args.workers)
    return cfg


def _out(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir)


def _gen_spec(args) -> GenSpec:
    return GenSpec(periods=args.periods, budget=args.budget, kind=args.kind)


def _vec(x) -> str:
    return "[" + ", ".join(f"{v:.6f}" for v in np.asarray(x, dtype=float)) + "]"


def cmd_env_gen(args) -> int:
    env = env_generate(args.seed, _gen_spec(args))
    if args.out:
        env_save(env, args.out)
        print(f"wrote {args.out}")
    else:
        print(json.dumps(env_to_dict(env), indent=2))
    return 0


def cmd_env_save(args) -> int:
    env = env_load(args.env) if args.env else env_generate(args.seed, _gen_spec(args))
    env_save(tabulate(env, args.points), args.out)
    print(f"wrote tabulated environment ({env.periods} periods, {args.points} points) to {args.out}")
    return 0


def cmd_env_validate(args) -> int:
    env = env_load(args.file)
    print(f"{args.file}: ok ({env.periods} periods, budget {env.budget:g})")
    return 0


def cmd_solve(args) -> int:
    env = env_load(args.env) if args.env else env_generate(args.seed, _gen_spec(args))
    res = solve_equal_marginal(env)
    print(f"oracle allocation: {_vec(res.allocation)}")
    print(f"common marginal:   {res.common_marginal:.6f}")
    print(f"oracle variance:   {res_var(env, res.allocation):.3e}")
    if args.step > 0:
        brute = solve_bruteforce(env, args.step)
        bv = res_var(env, brute)
        print(f"brute allocation:  {_vec(brute)}  (step {args.step:g})")
        print(f"brute variance:    {bv:.3e}")
        print(f"oracle - brute:    {res_var(env, res.allocation) - bv:.3e}")
    return 0


def res_var(env, alloc) -> float:
    return mroi_variance(env_evaluate(env, alloc))


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_experiment(cfg, _out(args, cfg), overwrite=args.overwrite)
    print(format_summary(res.summary))
    print(f"results in {res.output_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = cfg.train_seed if args.seed is None else args.seed
    out = _out(args, cfg)
    _, rows = run_training(cfg, seed, out, overwrite=args.overwrite)
    first, final = window_means(rows)
    print(f"trained {len(rows)} iterations (seed {seed})")
    print(f"best-record variance: first window {first:.6f}, final window {final:.6f} (ratio {final / first:.3f})")
    print(f"results in {out}")
    return 0


def cmd_sweep_periods(args) -> int:
    cfg = _config(args)
    rows = run_period_sweep(cfg, args.periods, _out(args, cfg), overwrite=args.overwrite)
    print(f"{'T':>3}  {'episode 1':>10}  {'final':>10}  {'uniform':>10}  beats uniform")
    for r in rows:
        print(f"{r['periods']:>3}  {r['first_episode_mean']:>10.6f}  {r['final_episode_mean']:>10.6f}  "
              f"{r['uniform_mean']:>10.6f}  {r['beats_uniform']}")
    return 0


def _parse_m(text: str):
    if text.lower() in ("none", "static"):
        return None
    try:
        m = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"refresh period must be an integer or 'none', got {text!r}") from None
    if m < 1:
        raise argparse.ArgumentTypeError("refresh period must be >= 1")
    return m


def cmd_sweep_refresh(args) -> int:
    cfg = _config(args)
    res = run_refresh_sweep(cfg, args.m, args.seeds, beta0=args.beta0,
                            output_dir=_out(args, cfg), overwrite=args.overwrite)
    for a in res["arms"]:
        print(f"{a['arm']:>8}  final-window variance {a['final_window_mean']:.6f}")
    order = res["ordering"]
    if order is not None:
        if order["deviation_flagged"]:
            print(f"ORDERING DEVIATION: {order['note']}")
        else:
            print("ordering holds for the majority of seeds")
    return 0


def cmd_report(args) -> int:
    summary, matches = report(args.dir)
    print(format_summary(summary))
    if args.json:
        Path(args.json).write_text(dump_json(summary))
    print("stored summary matches" if matches else "stored summary missing or different")
    return 0 if matches else 1


def _add_gen_args(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--periods", type=int, default=6)
    p.add_argument("--budget", type=float, default=6.0)
    p.add_argument("--kind", choices=("poly", "exp", "mixed"), default="poly")


def _add_run_args(p):
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--overwrite", action="store_true", help="replace differing results")
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="budgetalloc", description=__doc__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    env = sub.add_parser("env", help="generate, tabulate or validate environments")
    env_sub = env.add_subparsers(dest="env_command", required=True)
    p = env_sub.add_parser("gen", help="generate a parametric environment")
    _add_gen_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_env_gen)
    p = env_sub.add_parser("save", help="write a tabulated copy of an environment")
    _add_gen_args(p)
    p.add_argument("--env", help="source environment file (default: generate from --seed)")
    p.add_argument("--points", type=int, default=61)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_env_save)
    p = env_sub.add_parser("validate", help="check an environment file")
    p.add_argument("file")
    p.set_defaults(func=cmd_env_validate)

    p = sub.add_parser("solve", help="oracle allocation with a brute-force cross-check")
    _add_gen_args(p)
    p.add_argument("--env")
    p.add_argument("--step", type=float, default=0.02, help="brute-force grid step; 0 skips it")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("run", help="repeated dual-phase experiment")
    _add_run_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train a policy with group-relative optimization")
    _add_run_args(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    sweep = sub.add_parser("sweep", help="parameter sweeps")
    sweep_sub = sweep.add_subparsers(dest="sweep_command", required=True)
    p = sweep_sub.add_parser("periods", help="dual-phase experiment per number of periods")
    _add_run_args(p)
    p.add_argument("--periods", type=int, nargs="+", default=[2, 4, 6, 8, 10])
    p.set_defaults(func=cmd_sweep_periods)
    p = sweep_sub.add_parser("refresh", help="training per reference refresh period")
    _add_run_args(p)
    p.add_argument("--m", type=_parse_m, nargs="+", default=[60, None], help="refresh periods; 'none' is static")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--beta0", action="store_true", help="add a KL-free arm (beta=0)")
    p.set_defaults(func=cmd_sweep_refresh)

    p = sub.add_parser("report", help="recompute summaries from persisted metrics")
    p.add_argument("dir")
    p.add_argument("--json", help="also write the recomputed summary here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BudgetAllocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
