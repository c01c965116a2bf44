"""Experiment orchestration: configuration, baselines, runs and sweeps."""

from budgetalloc.harness.baselines import OracleAgent, UniformAgent, baseline_uniform, make_agent
from budgetalloc.harness.config import ExperimentConfig, config_from_dict, load_config, save_config
from budgetalloc.harness.experiment import (
    MetricRow,
    read_metrics,
    report,
    run_experiment,
    summarize,
)
from budgetalloc.harness.sweeps import run_period_sweep, run_refresh_sweep, run_training

__all__ = [
    "ExperimentConfig",
    "MetricRow",
    "OracleAgent",
    "UniformAgent",
    "baseline_uniform",
    "config_from_dict",
    "load_config",
    "make_agent",
    "read_metrics",
    "report",
    "run_experiment",
    "run_period_sweep",
    "run_refresh_sweep",
    "run_training",
    "save_config",
    "summarize",
]
