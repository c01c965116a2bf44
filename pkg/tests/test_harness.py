import json

import numpy as np
import pytest

import budgetalloc.harness.experiment as experiment
from budgetalloc.envmodel import EnvMeta, GenSpec, env_generate, env_save
from budgetalloc.errors import ConfigError, ExperimentError, OutputConflictError
from budgetalloc.harness import (
    ExperimentConfig,
    baseline_uniform,
    config_from_dict,
    load_config,
    read_metrics,
    report,
    run_experiment,
    run_period_sweep,
    run_refresh_sweep,
    save_config,
    summarize,
)
from budgetalloc.harness.sweeps import refresh_arms


class TestBaseline:
    def test_six(self):
        np.testing.assert_array_equal(baseline_uniform(EnvMeta(6, 6.0)), np.ones(6))

    def test_four(self):
        np.testing.assert_array_equal(baseline_uniform(EnvMeta(4, 6.0)), [1.5] * 4)

    @pytest.mark.parametrize("t", [2, 3, 7, 11])
    def test_sum(self, t):
        assert baseline_uniform(EnvMeta(t, 6.0)).sum() == pytest.approx(6.0, abs=1e-12)


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        g, r = cfg.grpo_config(), cfg.reward_config()
        assert (g.iterations, g.refresh_period, g.batch_prompts, g.group_size) == (500, 60, 8, 3)
        assert (g.kl_beta, g.clip_eps, g.tries_per_env) == (0.04, 0.1, 10)
        assert (r.delta, r.tau, r.alpha, r.budget, r.periods) == (0.2, 0.2, 0.5, 6.0, 6)
        assert cfg.endpoint_url is None and cfg.max_completion == 500
        assert cfg.repeats == 5 and cfg.n_try == 10 and cfg.w == 3 and cfg.fewshot_k == 3

    def test_roundtrip(self, tmp_path):
        cfg = ExperimentConfig(repeats=2, seeds=(4, 9), refresh_period=None)
        save_config(cfg, tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="kl_beat"):
            config_from_dict({"kl_beat": 0.1})

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(repeats=0)
        with pytest.raises(ConfigError):
            ExperimentConfig(repeats=2, seeds=(1,))
        with pytest.raises(ConfigError):
            ExperimentConfig(reasoner="llm")
        with pytest.raises(ConfigError):
            ExperimentConfig(group_size=1)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            config_from_dict({"env_file": "nope.json"}, source_dir=str(tmp_path))

    def test_relative_paths(self, tmp_path):
        env_save(env_generate(0, GenSpec()), tmp_path / "env.json")
        (tmp_path / "c.json").write_text(json.dumps({"env_file": "env.json", "repeats": 1}))
        res = run_experiment(load_config(tmp_path / "c.json"))
        assert len(res.rows) == 10

    def test_malformed_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{\n  'repeats': 1}")
        with pytest.raises(ConfigError, match="line 2"):
            load_config(tmp_path / "c.json")


class TestExperiment:
    def test_rows_dense(self):
        res = run_experiment(ExperimentConfig(repeats=2))
        for rid in {r.run_id for r in res.rows}:
            assert [r.episode_index for r in res.rows if r.run_id == rid] == list(range(1, 11))

    def test_single_repeat_ci(self):
        res = run_experiment(ExperimentConfig(repeats=1))
        ep = res.summary["episodes"][0]["mroi_variance"]
        assert ep["n"] == 1 and ep["ci_half_width"] == "n/a"

    def test_ci_matches_t(self):
        from scipy import stats

        res = run_experiment(ExperimentConfig(repeats=4))
        v = np.array([r.mroi_variance for r in res.rows if r.episode_index == 1])
        half = stats.t.ppf(0.975, 3) * v.std(ddof=1) / 2
        assert res.summary["episodes"][0]["mroi_variance"]["ci_half_width"] == pytest.approx(half)

    def test_oracle_agents(self):
        res = run_experiment(ExperimentConfig(reasoner="oracle", optimizer="oracle", repeats=3))
        assert all(r.mroi_variance <= 1e-6 for r in res.rows if r.episode_index == 1)

    def test_deterministic_files(self, tmp_path):
        cfg = ExperimentConfig(repeats=3, workers=3)
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg.replace(workers=1), tmp_path / "b")
        for name in ("metrics.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_refuses_overwrite(self, tmp_path):
        run_experiment(ExperimentConfig(repeats=2), tmp_path)
        run_experiment(ExperimentConfig(repeats=2), tmp_path)  # identical rerun is fine
        with pytest.raises(OutputConflictError):
            run_experiment(ExperimentConfig(repeats=2, seed=5), tmp_path)
        run_experiment(ExperimentConfig(repeats=2, seed=5), tmp_path, overwrite=True)
        assert read_metrics(tmp_path / "metrics.csv")[0].seed == 5

    def test_report_matches(self, tmp_path):
        res = run_experiment(ExperimentConfig(repeats=3), tmp_path)
        summary, ok = report(tmp_path)
        assert ok and summary == json.loads(json.dumps(res.summary))
        assert summarize(read_metrics(tmp_path / "metrics.csv"), "experiment") == res.summary

    def test_partial_failure(self, tmp_path, monkeypatch):
        real = experiment.build_env

        def flaky(cfg, seed):
            if seed == 1:
                raise RuntimeError("boom")
            return real(cfg, seed)

        monkeypatch.setattr(experiment, "build_env", flaky)
        with pytest.raises(ExperimentError):
            run_experiment(ExperimentConfig(repeats=3), tmp_path)
        manifest = json.loads((tmp_path / "errors.json").read_text())
        assert manifest["failed"][0]["seed"] == 1
        assert {r.seed for r in read_metrics(tmp_path / "metrics.csv")} == {0, 2}

    def test_policy_agent(self, tmp_path):
        from budgetalloc.grpo import SimplexPolicy, save_policy

        save_policy(SimplexPolicy.initial(6, 6.0), tmp_path / "p.json")
        cfg = ExperimentConfig(optimizer="policy", policy_path=str(tmp_path / "p.json"), repeats=1)
        assert len(run_experiment(cfg).rows) == 10


class TestSweeps:
    def test_single_period(self):
        rows = run_period_sweep(ExperimentConfig(repeats=2), [2])
        assert [r["periods"] for r in rows] == [2]

    def test_all_periods_once(self, tmp_path):
        rows = run_period_sweep(ExperimentConfig(repeats=2), [2, 4, 6], tmp_path)
        assert [r["periods"] for r in rows] == [2, 4, 6]
        assert (tmp_path / "T4" / "metrics.csv").exists()

    def test_bad_periods(self):
        with pytest.raises(ConfigError):
            run_period_sweep(ExperimentConfig(), [1, 4])

    def test_arms(self):
        cfg = ExperimentConfig()
        assert [a.label for a in refresh_arms(cfg, [60])] == ["M=60"]
        arms = refresh_arms(cfg, [30, None], beta0=True)
        assert [a.label for a in arms] == ["M=30", "static", "beta=0"]
        assert arms[1].kl_beta == 0.04 and arms[2].kl_beta == 0.0

    def test_refresh_sweep_small(self, tmp_path):
        cfg = ExperimentConfig(iterations=20, batch_prompts=2, refresh_period=10)
        res = run_refresh_sweep(cfg, [10, None], [0, 1], beta0=True, output_dir=tmp_path)
        assert [a["arm"] for a in res["arms"]] == ["M=10", "static", "beta=0"]
        assert res["ordering"] is not None
        assert res["ordering"]["deviation_flagged"] == (not res["ordering"]["holds_for_majority"])
        assert (tmp_path / "refresh_sweep.csv").exists()

    def test_refresh_single_arm_no_ordering(self):
        res = run_refresh_sweep(ExperimentConfig(iterations=5, batch_prompts=1), [60], [0])
        assert len(res["arms"]) == 1 and res["ordering"] is None
