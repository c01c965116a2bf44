import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetalloc.envmodel import (
    EnvMeta,
    Environment,
    EpisodeRecord,
    GenSpec,
    MroiCurve,
    curve_eval,
    env_evaluate,
    env_from_dict,
    env_generate,
    env_load,
    env_save,
    env_to_dict,
    has_interior_optimum,
    tabulate,
    validate_allocation,
)
from budgetalloc.errors import DomainError, EnvFileError, GenerationError, ShapeError, ValidationError

from conftest import linear


class TestCurves:
    def test_polynomial_at_zero(self):
        assert curve_eval(linear(2.0, 0.5), 0.0, 6.0) == 2.0

    def test_polynomial_clamped(self):
        c = linear(2.0, 0.5)
        assert c.raw(5.0) == pytest.approx(-0.5)
        assert curve_eval(c, 5.0, 6.0) == 0.0

    def test_exponential_at_zero(self):
        assert curve_eval(MroiCurve.exponential(1.0, 1.0, 0.5), 0.0) == pytest.approx(0.5)

    def test_domain(self):
        c = linear(2.0, 0.5)
        with pytest.raises(DomainError):
            curve_eval(c, -0.1, 6.0)
        with pytest.raises(DomainError):
            curve_eval(c, 6.5, 6.0)
        with pytest.raises(DomainError):
            curve_eval(c, math.nan, 6.0)

    def test_table_interpolates(self):
        c = MroiCurve.table([[0, 1.0], [2, 0.5], [6, 0.0]])
        assert curve_eval(c, 1.0) == pytest.approx(0.75)
        assert curve_eval(c, 4.0) == pytest.approx(0.25)

    @pytest.mark.parametrize("curve", [linear(2.0, 0.5), MroiCurve.exponential(2.0, 0.7, 0.4),
                                       MroiCurve.table([[0, 1.0], [3, 0.4], [6, 0.0]])])
    def test_invert_roundtrip(self, curve):
        for level in (0.05, 0.2, 0.35):
            b = curve.invert(level, 6.0)
            assert float(curve.value(b)) == pytest.approx(level, abs=1e-9)


class TestEnvironment:
    def test_evaluate_two_periods(self, two_period_env):
        np.testing.assert_allclose(env_evaluate(two_period_env, [2, 4]), [1.0, 0.0])

    def test_evaluate_symmetric(self, identical_env):
        np.testing.assert_allclose(env_evaluate(identical_env, [2, 2, 2]), [2 / 3] * 3)

    def test_zero_allocation(self, two_period_env):
        np.testing.assert_allclose(env_evaluate(two_period_env, [0, 0]), [2.0, 1.0])

    def test_shape_error(self, two_period_env):
        with pytest.raises(ShapeError):
            env_evaluate(two_period_env, [1, 2, 3])

    def test_domain_error(self, two_period_env):
        with pytest.raises(DomainError):
            env_evaluate(two_period_env, [-1, 7])

    def test_single_period_rejected(self):
        with pytest.raises(ValidationError):
            Environment((linear(1, 0.1),), 6.0)

    def test_increasing_curve_rejected(self):
        with pytest.raises(ValidationError, match="curve 1"):
            Environment((linear(1, 0.1), MroiCurve.polynomial([0.5, 0.1])), 6.0)

    def test_meta(self, two_period_env):
        assert two_period_env.meta == EnvMeta(2, 6.0)


class TestAllocation:
    def test_validate(self):
        validate_allocation([3, 3], EnvMeta(2, 6.0))
        with pytest.raises(ValidationError):
            validate_allocation([3, 2], EnvMeta(2, 6.0))
        with pytest.raises(ValidationError):
            validate_allocation([7, -1], EnvMeta(2, 6.0))
        with pytest.raises(ShapeError):
            validate_allocation([6], EnvMeta(2, 6.0))

    def test_record_is_readonly(self):
        rec = EpisodeRecord(np.array([3.0, 3.0]), np.array([0.1, 0.2]))
        with pytest.raises(ValueError):
            rec.allocation[0] = 1.0
        assert rec.ok


class TestGenerate:
    def test_deterministic(self):
        spec = GenSpec(periods=6, budget=6.0, kind="poly")
        assert env_generate(7, spec) == env_generate(7, spec)

    def test_seeds_differ(self):
        spec = GenSpec(periods=6, budget=6.0, kind="poly")
        assert env_generate(7, spec).curves != env_generate(8, spec).curves

    @pytest.mark.parametrize("kind", ["poly", "exp", "mixed"])
    def test_curves_decreasing_while_positive(self, kind):
        env = env_generate(3, GenSpec(kind=kind))
        grid = np.linspace(0, env.budget, 1000)
        for c in env.curves:
            v = c.value(grid)
            pos = v[:-1] > 0
            assert np.all(v[1:][pos] < v[:-1][pos])
            assert np.all(v >= 0)

    def test_interior(self):
        for seed in range(20):
            assert has_interior_optimum(env_generate(seed, GenSpec()))

    def test_infeasible_spec(self):
        with pytest.raises(GenerationError):
            env_generate(0, GenSpec(intercept_range=(5.0, 9.0)))
        with pytest.raises(GenerationError):
            env_generate(0, GenSpec(periods=1))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 8))
    def test_generated_envs_valid(self, seed, periods):
        env = env_generate(seed, GenSpec(periods=periods, kind="mixed"))
        assert env.periods == periods


class TestFiles:
    def test_roundtrip(self, tmp_path):
        env = env_generate(5, GenSpec(kind="mixed"))
        path = tmp_path / "env.json"
        env_save(env, path)
        loaded = env_load(path)
        assert loaded.periods == 6
        assert loaded.curves == env.curves

    def test_tabulated_roundtrip(self, tmp_path):
        env = tabulate(env_generate(5, GenSpec()))
        env_save(env, tmp_path / "t.json")
        assert env_load(tmp_path / "t.json").curves == env.curves

    def test_increasing_samples_named(self):
        obj = env_to_dict(tabulate(env_generate(1, GenSpec())))
        pts = obj["curves"][3]["points"]
        pts[5][1] = pts[4][1] + 0.1
        with pytest.raises(ValidationError, match="curve 3 not decreasing"):
            env_from_dict(obj)

    def test_single_period_file(self):
        obj = {"budget": 6, "periods": 1, "curves": [{"kind": "poly", "coeffs": [1, -0.1]}]}
        with pytest.raises(ValidationError, match="T >= 2"):
            env_from_dict(obj)

    def test_bad_json_position(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"budget": 6,\n  "periods": }')
        with pytest.raises(EnvFileError, match="line 2"):
            env_load(p)

    def test_field_context(self):
        obj = {"budget": 6, "periods": 2, "curves": [{"kind": "poly", "coeffs": [1, -0.1]}, {"kind": "exp", "a": 1}]}
        with pytest.raises(EnvFileError, match=r"curves\[1\].*'k'"):
            env_from_dict(obj)

    def test_unknown_kind(self):
        obj = {"budget": 6, "periods": 2, "curves": [{"kind": "poly", "coeffs": [1, -0.1]}, {"kind": "cubic"}]}
        with pytest.raises(EnvFileError, match="kind"):
            env_from_dict(obj)

    def test_json_is_plain(self, tmp_path):
        env_save(env_generate(0, GenSpec(periods=2)), tmp_path / "e.json")
        obj = json.loads((tmp_path / "e.json").read_text())
        assert set(obj) == {"budget", "periods", "curves"}
