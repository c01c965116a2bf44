"""Optimal allocations under diminishing returns.

``solve_equal_marginal`` finds the common marginal level at which the
per-period budgets exactly exhaust the total budget.  ``solve_bruteforce``
is an independent check: it minimizes the marginal-ROI variance over a
discrete grid of allocations without ever inverting a curve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from budgetalloc.envmodel import Environment
from budgetalloc.errors import CapacityError, InvariantError, ShapeError

LAMBDA_TOL = 1e-10
MAX_ITER = 200
MAX_GRID_POINTS = 10**8


@dataclass(frozen=True)
class OracleResult:
    allocation: np.ndarray
    common_marginal: float
    iterations: int
    residual: float


def mroi_variance(mroi) -> float:
    """Population variance of a marginal-ROI vector."""
    m = np.asarray(mroi, dtype=float)
    if m.ndim != 1 or m.size < 2:
        raise ShapeError(f"need at least two periods, got shape {m.shape}")
    return float(np.var(m))


def budgets_at_level(env: Environment, level: float, caps: np.ndarray | None = None) -> np.ndarray:
    """Budget each period needs for its marginal ROI to drop to ``level``."""
    if caps is None:
        caps = np.array([c.zero_crossing(env.budget) for c in env.curves])
    if level <= 0:
        return caps.copy()
    return np.array([min(c.invert(level, env.budget), cap) for c, cap in zip(env.curves, caps)])


def solve_equal_marginal(env: Environment) -> OracleResult:
    """Allocation that equalizes marginal ROI across periods with headroom."""
    B = env.budget
    T = env.periods
    caps = np.array([c.zero_crossing(B) for c in env.curves])
    total_cap = caps.sum()
    if total_cap <= B:
        # even a zero marginal cannot absorb the budget; spread the surplus
        alloc = caps + (B - total_cap) / T
        return OracleResult(alloc, 0.0, 0, abs(alloc.sum() - B))

    lo = 0.0
    hi = max(float(c.raw(0.0)) for c in env.curves)
    b_lo = caps.copy()
    b_hi = np.zeros(T)
    it = 0
    while hi - lo > LAMBDA_TOL and it < MAX_ITER:
        it += 1
        mid = 0.5 * (lo + hi)
        b_mid = budgets_at_level(env, mid, caps)
        s = b_mid.sum()
        if s > B:
            lo, b_lo = mid, b_mid
        else:
            hi, b_hi = mid, b_mid
        if s == B:
            lo, b_lo = mid, b_mid
            break
    s_lo, s_hi = b_lo.sum(), b_hi.sum()
    if s_lo < B - 1e-12 or s_hi > B + 1e-12:
        raise InvariantError("budget sum not monotone in the marginal level")
    if s_lo == s_hi:
        alloc = b_lo
    else:
        # blend the bracketing solutions so the budget is met exactly
        theta = (B - s_hi) / (s_lo - s_hi)
        alloc = b_hi + theta * (b_lo - b_hi)
    alloc = np.clip(alloc, 0.0, B)
    lam = 0.5 * (lo + hi)
    return OracleResult(alloc, lam, it, float(abs(alloc.sum() - B)))


def _dp_batch(costs: list[np.ndarray], mus: np.ndarray):
    """Minimize sum_t (m_t - mu)^2 over integer budgets summing to n for each mu.

    ``costs[t]`` holds the marginal values of period t on the budget grid
    ``0..n``.  Returns the optimal grid allocation for every mu, ties broken
    towards lexicographically smallest vectors.
    """
    T = len(costs)
    n = costs[0].size - 1
    K = mus.size
    sq = [(c[None, :] - mus[:, None]) ** 2 for c in costs]
    # suffix tables: best[t][k, j] = min cost of periods t.. using exactly j units
    choice = [None] * T
    best = sq[T - 1]
    # shift[i, j] = j - i + n indexes a front-padded suffix table; entries
    # with j < i land in the inf padding
    idx = np.arange(n + 1)
    shift = idx[None, :] - idx[:, None] + n
    pad = np.full((K, n), np.inf)
    for t in range(T - 2, 0, -1):
        full = sq[t][:, :, None] + np.concatenate([pad, best], axis=1)[:, shift]
        choice[t] = np.argmin(full, axis=1)
        best = np.take_along_axis(full, choice[t][:, None, :], axis=1)[:, 0, :]
    # first period: only the total n matters
    tot = sq[0] + best[:, ::-1]
    i0 = np.argmin(tot, axis=1)
    allocs = np.zeros((K, T), dtype=np.int64)
    allocs[:, 0] = i0
    remaining = n - i0
    for t in range(1, T - 1):
        it = choice[t][np.arange(K), remaining]
        allocs[:, t] = it
        remaining = remaining - it
    allocs[:, T - 1] = remaining
    return allocs


def solve_bruteforce(env: Environment, step: float, tol: float = 1e-12) -> np.ndarray:
    """Exact variance minimizer over allocations in multiples of ``step``.

    The variance equals ``min_mu mean((m - mu)^2)``, and for fixed ``mu`` the
    problem separates over periods, so a knapsack recursion solves it
    exactly.  The outer search over ``mu`` is a branch-and-bound on
    intervals: the lower envelope of the unit-curvature parabolas cannot dip
    more than ``h^2/4`` below the chord, so intervals whose bound cannot
    beat the incumbent by more than ``tol`` are discarded.
    """
    B = env.budget
    T = env.periods
    if not step > 0 or step > B:
        raise CapacityError(f"step must lie in (0, {B}], got {step}")
    n_float = B / step
    n = int(round(n_float))
    if n < 1 or abs(n - n_float) > 1e-9 * max(1.0, n_float):
        raise CapacityError(f"budget {B} is not a multiple of step {step}")
    if T * (n + 1) > MAX_GRID_POINTS or (T > 2 and (n + 1) ** 2 * T > MAX_GRID_POINTS):
        raise CapacityError(f"grid of {T} x {n + 1} points too large; use a coarser step")

    grid = np.arange(n + 1) * step
    grid[-1] = B
    vals = [c.value(grid) for c in env.curves]
    hi_mu = max(float(v[0]) for v in vals)
    lo_mu = min(float(v[-1]) for v in vals)

    def variance_of(units):
        return float(np.var([vals[t][u] for t, u in enumerate(units)]))

    best_var = np.inf
    best_units: tuple = ()
    cache: dict[float, float] = {}

    def evaluate(mus: np.ndarray):
        nonlocal best_var, best_units
        todo = np.array([m for m in mus if m not in cache])
        if todo.size:
            allocs = _dp_batch(vals, todo)
            for mu, units in zip(todo, allocs):
                units = tuple(int(u) for u in units)
                v = variance_of(units)
                m = np.mean([vals[t][u] for t, u in enumerate(units)])
                cache[float(mu)] = v + (mu - m) ** 2
                if v < best_var - 1e-15 or (abs(v - best_var) <= 1e-15 and units < best_units):
                    best_var, best_units = v, units
        return np.array([cache[float(m)] for m in mus])

    if hi_mu - lo_mu <= 0:
        evaluate(np.array([lo_mu]))
    else:
        mus = np.linspace(lo_mu, hi_mu, 9)
        d = evaluate(mus)
        intervals = [(mus[i], mus[i + 1], d[i], d[i + 1]) for i in range(mus.size - 1)]
        while intervals:
            keep = [
                iv for iv in intervals
                if min(iv[2], iv[3]) - (iv[1] - iv[0]) ** 2 / 4 < best_var - tol
            ]
            if not keep:
                break
            mids = np.array([(a + b) / 2 for a, b, _, _ in keep])
            dm = evaluate(mids)
            intervals = []
            for (a, b, da, db), m, dmid in zip(keep, mids, dm):
                if b - a < 1e-12:
                    continue
                intervals += [(a, m, da, dmid), (m, b, dmid, db)]
    return np.array(best_units, dtype=float) * step
