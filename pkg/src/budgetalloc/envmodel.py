"""Marginal-ROI curves, environments and their file format.

A curve maps the budget spent in one period to the marginal return of the
next budget unit.  Every curve is clamped at zero and must be strictly
decreasing while positive, which is the discrete stand-in for concave
cumulative returns.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import brentq

from budgetalloc.errors import (
    DomainError,
    EnvFileError,
    GenerationError,
    InvariantError,
    ShapeError,
    ValidationError,
)

KINDS = ("poly", "exp", "table")
GRID_POINTS = 1000
ALLOC_TOL = 1e-9


class EnvMeta(NamedTuple):
    """What an agent is allowed to know about an environment."""

    periods: int
    budget: float


@dataclass(frozen=True)
class MroiCurve:
    """One period's marginal-ROI function, evaluated as ``max(F(b), 0)``.

    ``params`` depends on ``kind``:

    * ``poly``  -- coefficients of F in ascending degree
    * ``exp``   -- ``(a, k, d)`` for ``F(b) = a * exp(-k b) - d``
    * ``table`` -- ``((b0, m0), (b1, m1), ...)`` sample points, linearly
      interpolated and extended with the boundary values
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown curve kind {self.kind!r}")
        if self.kind == "poly":
            if len(self.params) == 0:
                raise ValidationError("polynomial curve needs at least one coefficient")
        elif self.kind == "exp":
            if len(self.params) != 3:
                raise ValidationError("exponential curve needs (a, k, d)")
            a, k, d = self.params
            if not (a > 0 and k > 0 and d >= 0):
                raise ValidationError(f"exponential curve needs a>0, k>0, d>=0, got {self.params}")
        else:
            _check_table_points(self.params)

    @classmethod
    def polynomial(cls, coeffs: Sequence[float]) -> MroiCurve:
        return cls("poly", tuple(float(c) for c in coeffs))

    @classmethod
    def exponential(cls, a: float, k: float, d: float) -> MroiCurve:
        return cls("exp", (float(a), float(k), float(d)))

    @classmethod
    def table(cls, points: Sequence[Sequence[float]]) -> MroiCurve:
        return cls("table", tuple((float(b), float(m)) for b, m in points))

    @cached_property
    def _table_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(self.params, dtype=float)
        return pts[:, 0], pts[:, 1]

    def raw(self, b):
        """Unclamped F(b); accepts scalars or arrays."""
        if self.kind == "poly":
            return P.polyval(b, self.params)
        if self.kind == "exp":
            a, k, d = self.params
            return a * np.exp(-k * np.asarray(b, dtype=float)) - d
        xs, ys = self._table_arrays
        return np.interp(b, xs, ys)

    def value(self, b):
        """Clamped marginal ROI ``max(F(b), 0)`` without domain checks."""
        return np.maximum(self.raw(b), 0.0)

    def zero_crossing(self, upper: float) -> float:
        """Smallest budget in [0, upper] where the curve reaches zero, else ``upper``."""
        return self.invert(0.0, upper)

    def invert(self, level: float, upper: float) -> float:
        """Budget in [0, upper] at which the clamped curve equals ``level``.

        Returns 0 when the curve starts at or below ``level`` and ``upper`` when
        the curve is still above ``level`` at ``upper``.  For ``level == 0`` the
        result is the first zero crossing.
        """
        f0 = float(self.raw(0.0))
        if f0 <= level:
            return 0.0
        if float(self.raw(upper)) > level:
            return float(upper)
        if self.kind == "exp":
            a, k, d = self.params
            b = math.log(a / (level + d)) / k
            return min(max(b, 0.0), float(upper))
        if self.kind == "table":
            return self._invert_table(level, upper)
        return self._invert_poly(level, upper)

    def _invert_table(self, level: float, upper: float) -> float:
        xs, ys = self._table_arrays
        # first sample at or below level; the interpolant is monotone before it
        idx = int(np.argmax(ys <= level))
        if ys[idx] > level:
            return float(upper)
        if idx == 0:
            return 0.0
        x0, x1, y0, y1 = xs[idx - 1], xs[idx], ys[idx - 1], ys[idx]
        if not y0 > level:
            raise InvariantError("table curve not decreasing during inversion")
        b = x0 + (y0 - level) * (x1 - x0) / (y0 - y1)
        return min(max(float(b), 0.0), float(upper))

    def _invert_poly(self, level: float, upper: float) -> float:
        grid = np.linspace(0.0, upper, GRID_POINTS + 1)
        vals = self.raw(grid) - level
        idx = int(np.argmax(vals <= 0))
        if vals[idx] == 0:
            return float(grid[idx])
        lo, hi = grid[idx - 1], grid[idx]
        if not (vals[idx - 1] > 0 > vals[idx]):
            raise InvariantError("polynomial curve not decreasing during inversion")
        return float(brentq(lambda x: float(self.raw(x)) - level, lo, hi, xtol=1e-15, rtol=1e-15))


def _check_table_points(points) -> None:
    if len(points) < 2:
        raise ValidationError("table curve needs at least two points")
    for p in points:
        if len(p) != 2:
            raise ValidationError(f"table point {p!r} is not a (budget, mroi) pair")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    if not all(math.isfinite(v) for v in xs + ys):
        raise ValidationError("table curve contains non-finite values")
    for i in range(1, len(xs)):
        if not xs[i] > xs[i - 1]:
            raise ValidationError(f"table budgets not strictly increasing at index {i}")


def check_curve(curve: MroiCurve, budget: float, index: int = 0) -> None:
    """Raise ``ValidationError`` unless the curve is strictly decreasing while positive on [0, budget]."""
    if curve.kind == "table":
        ys = [p[1] for p in curve.params]
        for i, y in enumerate(ys):
            if y < 0:
                raise ValidationError(f"curve {index} has negative mroi at index {i}")
        for i in range(1, len(ys)):
            if ys[i - 1] > 0 and not ys[i] < ys[i - 1]:
                raise ValidationError(f"curve {index} not decreasing at index {i}")
            if ys[i - 1] == 0 and ys[i] != 0:
                raise ValidationError(f"curve {index} not decreasing at index {i}")
    grid = np.linspace(0.0, budget, GRID_POINTS)
    vals = curve.value(grid)
    if not np.all(np.isfinite(vals)):
        raise ValidationError(f"curve {index} is not finite on [0, {budget}]")
    positive = vals[:-1] > 0
    bad = np.flatnonzero(positive & ~(vals[1:] < vals[:-1]))
    if bad.size:
        raise ValidationError(f"curve {index} not decreasing at index {int(bad[0]) + 1}")
    # once clamped to zero the curve must stay there
    zeros = np.flatnonzero(vals == 0)
    if zeros.size and np.any(vals[zeros[0]:] > 0):
        raise ValidationError(f"curve {index} not decreasing at index {int(zeros[0])}")


@dataclass(frozen=True)
class Environment:
    """``T`` marginal-ROI curves sharing a total budget ``B``."""

    curves: tuple[MroiCurve, ...]
    budget: float
    seed: int | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "curves", tuple(self.curves))
        object.__setattr__(self, "budget", float(self.budget))
        if len(self.curves) < 2:
            raise ValidationError(f"environment needs T >= 2 periods, got {len(self.curves)}")
        if not (math.isfinite(self.budget) and self.budget > 0):
            raise ValidationError(f"budget must be positive, got {self.budget}")
        for i, c in enumerate(self.curves):
            check_curve(c, self.budget, i)

    @property
    def periods(self) -> int:
        return len(self.curves)

    @property
    def meta(self) -> EnvMeta:
        return EnvMeta(self.periods, self.budget)

    @property
    def env_id(self) -> str:
        if self.name:
            return self.name
        return f"gen-{self.seed}" if self.seed is not None else "env"


def curve_eval(curve: MroiCurve, b: float, budget: float | None = None) -> float:
    """Marginal ROI of ``curve`` at budget ``b``, clamped at zero."""
    if not (b >= 0) or (budget is not None and b > budget):
        raise DomainError(f"budget {b} outside [0, {budget}]")
    return float(curve.value(float(b)))


def env_evaluate(env: Environment, alloc) -> np.ndarray:
    """Per-period marginal ROI vector for an allocation."""
    x = np.asarray(alloc, dtype=float)
    if x.ndim != 1 or x.shape[0] != env.periods:
        raise ShapeError(f"allocation has shape {x.shape}, expected ({env.periods},)")
    if np.any(~(x >= 0)) or np.any(x > env.budget):
        raise DomainError(f"allocation entries must lie in [0, {env.budget}]")
    return np.array([float(c.value(v)) for c, v in zip(env.curves, x)])


def validate_allocation(values, meta: EnvMeta, tol: float = ALLOC_TOL) -> np.ndarray:
    """Return ``values`` as a float array after checking it is a feasible allocation."""
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.shape[0] != meta.periods:
        raise ShapeError(f"allocation has shape {x.shape}, expected ({meta.periods},)")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise ValidationError("allocation entries must be finite and nonnegative")
    if abs(x.sum() - meta.budget) > tol:
        raise ValidationError(f"allocation sums to {x.sum()}, expected {meta.budget}")
    return x


@dataclass(frozen=True)
class EpisodeRecord:
    """An executed allocation together with the marginal ROI it produced.

    ``failure`` is set for agent outputs that could not be scored as a
    length-T vector; ``mroi`` is then all zeros (nothing was observed).
    """

    allocation: np.ndarray
    mroi: np.ndarray
    failure: str | None = None

    def __post_init__(self):
        a = np.asarray(self.allocation, dtype=float).reshape(-1)
        m = np.asarray(self.mroi, dtype=float).reshape(-1)
        if a.shape != m.shape:
            raise ShapeError(f"allocation length {a.size} != mroi length {m.size}")
        if np.any(m < 0):
            raise ValidationError("mroi entries must be nonnegative")
        a.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "allocation", a)
        object.__setattr__(self, "mroi", m)

    @property
    def ok(self) -> bool:
        return self.failure is None


# --- generation -------------------------------------------------------------

INTERCEPT_BOUNDS = (0.3, 2.0)


@dataclass(frozen=True)
class GenSpec:
    """Parameter ranges for random environments.

    ``crossing_range`` is in units of ``budget / periods``: the default
    ``(0.5, 3.0)`` puts each zero crossing between half and three times the
    uniform share.  ``exp_shape_range`` bounds ``k * crossing`` for the
    exponential family.
    """

    periods: int = 6
    budget: float = 6.0
    kind: str = "poly"  # poly | exp | mixed
    intercept_range: tuple[float, float] = (0.5, 2.0)
    crossing_range: tuple[float, float] = (0.5, 3.0)
    degrees: tuple[int, ...] = (1, 2)
    exp_shape_range: tuple[float, float] = (0.5, 3.0)
    interior: bool = True
    max_retries: int = 50

    def with_periods(self, periods: int) -> GenSpec:
        return GenSpec(**{**self.__dict__, "periods": periods})


def _check_gen_spec(spec: GenSpec) -> tuple[float, float]:
    if spec.periods < 2 or not spec.budget > 0:
        raise GenerationError(f"need T >= 2 and B > 0, got T={spec.periods}, B={spec.budget}")
    if spec.kind not in ("poly", "exp", "mixed"):
        raise GenerationError(f"unknown generation kind {spec.kind!r}")
    share = spec.budget / spec.periods
    ilo, ihi = spec.intercept_range
    zlo, zhi = spec.crossing_range[0] * share, spec.crossing_range[1] * share
    # envelope the ranges must respect
    zlo_env, zhi_env = 0.3 * share, 2.5 * spec.budget
    if not (INTERCEPT_BOUNDS[0] <= ilo <= ihi <= INTERCEPT_BOUNDS[1]):
        raise GenerationError(f"intercept range {spec.intercept_range} outside {INTERCEPT_BOUNDS}")
    if not (zlo_env <= zlo <= zhi):
        raise GenerationError(f"zero-crossing range [{zlo}, {zhi}] infeasible")
    zhi = min(zhi, zhi_env)
    if zhi < zlo:
        raise GenerationError(f"zero-crossing range [{zlo}, {zhi}] infeasible")
    if spec.kind in ("poly", "mixed") and (not spec.degrees or min(spec.degrees) < 1):
        raise GenerationError(f"polynomial degrees must be >= 1, got {spec.degrees}")
    slo, shi = spec.exp_shape_range
    if spec.kind in ("exp", "mixed") and not (0 < slo <= shi):
        raise GenerationError(f"exp shape range {spec.exp_shape_range} infeasible")
    return zlo, zhi


def _draw_curve(rng: np.random.Generator, kind: str, spec: GenSpec, zlo: float, zhi: float) -> MroiCurve:
    intercept = rng.uniform(*spec.intercept_range)
    crossing = rng.uniform(zlo, zhi)
    if kind == "poly":
        p = int(rng.choice(spec.degrees))
        coeffs = [0.0] * (p + 1)
        coeffs[0] = intercept
        coeffs[p] = -intercept / crossing**p
        return MroiCurve.polynomial(coeffs)
    s = rng.uniform(*spec.exp_shape_range)
    k = s / crossing
    a = intercept / (1.0 - math.exp(-s))
    return MroiCurve.exponential(a, k, a * math.exp(-s))


def env_generate(seed: int, spec: GenSpec | None = None) -> Environment:
    """Random environment; identical seeds give bit-identical environments."""
    spec = spec or GenSpec()
    zlo, zhi = _check_gen_spec(spec)
    rng = np.random.default_rng(seed)
    last_err = None
    for _ in range(max(1, spec.max_retries)):
        curves = []
        for _t in range(spec.periods):
            kind = spec.kind if spec.kind != "mixed" else ("poly", "exp")[int(rng.integers(2))]
            curves.append(_draw_curve(rng, kind, spec, zlo, zhi))
        try:
            env = Environment(tuple(curves), spec.budget, seed=seed)
        except ValidationError as exc:
            last_err = exc
            continue
        if spec.interior and not has_interior_optimum(env):
            last_err = "optimum on the boundary"
            continue
        return env
    raise GenerationError(f"no valid environment after {spec.max_retries} retries: {last_err}")


def has_interior_optimum(env: Environment) -> bool:
    """True when all periods share a positive marginal level at the optimum.

    At the smallest intercept, the budgets the other periods absorb must
    fall short of B, and at level zero the crossings must exceed B.
    """
    lowest = min(float(c.raw(0.0)) for c in env.curves)
    if lowest <= 0:
        return False
    at_lowest = sum(c.invert(lowest, env.budget) for c in env.curves)
    at_zero = sum(c.zero_crossing(env.budget) for c in env.curves)
    return at_lowest < env.budget < at_zero


def tabulate(env: Environment, n_points: int = 61) -> Environment:
    """Sample every curve on a uniform grid and return the tabular equivalent."""
    grid = np.linspace(0.0, env.budget, n_points)
    curves = []
    for c in env.curves:
        vals = c.value(grid)
        curves.append(MroiCurve.table(list(zip(grid.tolist(), vals.tolist()))))
    return Environment(tuple(curves), env.budget, seed=env.seed, name=env.name)


# --- file format ------------------------------------------------------------


def curve_to_dict(curve: MroiCurve) -> dict:
    if curve.kind == "poly":
        return {"kind": "poly", "coeffs": list(curve.params)}
    if curve.kind == "exp":
        a, k, d = curve.params
        return {"kind": "exp", "a": a, "k": k, "d": d}
    return {"kind": "table", "points": [list(p) for p in curve.params]}


def env_to_dict(env: Environment) -> dict:
    return {
        "budget": env.budget,
        "periods": env.periods,
        "curves": [curve_to_dict(c) for c in env.curves],
    }


def _num(obj, key, where):
    if key not in obj:
        raise EnvFileError(f"{where}: missing field {key!r}")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise EnvFileError(f"{where}.{key}: expected a number, got {v!r}")
    return float(v)


def _curve_from_dict(obj, where: str) -> MroiCurve:
    if not isinstance(obj, dict):
        raise EnvFileError(f"{where}: expected an object")
    kind = obj.get("kind")
    try:
        if kind == "poly":
            coeffs = obj.get("coeffs")
            if not isinstance(coeffs, list) or not coeffs:
                raise EnvFileError(f"{where}.coeffs: expected a non-empty array")
            return MroiCurve.polynomial([_num({"c": c}, "c", f"{where}.coeffs") for c in coeffs])
        if kind == "exp":
            return MroiCurve.exponential(_num(obj, "a", where), _num(obj, "k", where), _num(obj, "d", where))
        if kind == "table":
            pts = obj.get("points")
            if not isinstance(pts, list):
                raise EnvFileError(f"{where}.points: expected an array of [budget, mroi] pairs")
            for j, p in enumerate(pts):
                if not (isinstance(p, list) and len(p) == 2):
                    raise EnvFileError(f"{where}.points[{j}]: expected a [budget, mroi] pair")
                _num({"b": p[0], "m": p[1]}, "b", f"{where}.points[{j}]")
                _num({"b": p[0], "m": p[1]}, "m", f"{where}.points[{j}]")
            return MroiCurve.table(pts)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from exc
    raise EnvFileError(f"{where}.kind: expected one of 'poly', 'exp', 'table', got {kind!r}")


def env_from_dict(obj, source: str = "<dict>") -> Environment:
    if not isinstance(obj, dict):
        raise EnvFileError(f"{source}: top level must be an object")
    budget = _num(obj, "budget", source)
    if "periods" not in obj or isinstance(obj["periods"], bool) or not isinstance(obj["periods"], int):
        raise EnvFileError(f"{source}.periods: expected an integer")
    curves_obj = obj.get("curves")
    if not isinstance(curves_obj, list):
        raise EnvFileError(f"{source}.curves: expected an array")
    if len(curves_obj) != obj["periods"]:
        raise ValidationError(f"{source}: periods={obj['periods']} but {len(curves_obj)} curves given")
    curves = [_curve_from_dict(c, f"{source}.curves[{i}]") for i, c in enumerate(curves_obj)]
    return Environment(tuple(curves), budget, name=source)


def env_save(env: Environment, path) -> None:
    Path(path).write_text(json.dumps(env_to_dict(env), indent=2) + "\n")


def env_load(path) -> Environment:
    """Load and validate an environment file."""
    path = Path(path)
    text = path.read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise EnvFileError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return env_from_dict(obj, source=str(path))
