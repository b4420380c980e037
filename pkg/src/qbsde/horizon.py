"""Horizon truncation for random and infinite horizons, with convergence diagnostics.

A random/infinite-horizon solution is approximated by the finite-horizon
problem on ``[0, n]`` with terminal value ``xi(X_tau) 1_{tau <= n}`` (exit
mode) or zero (pure infinite-horizon mode).  The truncation error is at most
``beta e^{-lambda n}``; half of a total budget ``eps`` goes to truncation and
the other half to time discretisation, controlled by grid doubling.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, NamedTuple, Optional

import numpy as np

from .bsde import BackwardSolution, solve_backward
from .forward import TimeGrid, first_exit, simulate
from .model import BoundSet, theoretical_bounds
from .regression import RegressionConfig

__all__ = [
    "HorizonWarning",
    "InfiniteSolution",
    "required_horizon",
    "solve_truncated",
    "solve_random_horizon",
    "CauchyTable",
    "cauchy_table",
    "WeightedGap",
    "weighted_l2_gap",
    "weighted_l2_bound",
]


class HorizonWarning(UserWarning):
    pass


def required_horizon(bounds: BoundSet, lam: float, eps: float) -> int:
    """Smallest integer ``n`` with ``beta e^{-lam n} <= eps / 2``.

    Returns 0 (with a :class:`HorizonWarning`) when ``eps >= beta``, since the
    truncation error is then already within budget.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    beta = bounds.beta
    if beta <= 0:
        return 0
    if eps >= beta:
        warnings.warn(f"eps={eps} >= beta={beta}: truncation bound already met", HorizonWarning)
        return 0
    return max(0, math.ceil(math.log(2.0 * beta / eps) / lam - 1e-12))


def _mode_for(spec, mode):
    natural = "terminal" if spec.has_exit else "zero"
    if mode is None:
        return natural
    if mode not in ("terminal", "zero"):
        raise ValueError(f"unknown horizon mode {mode!r}")
    if mode != natural:
        raise ValueError(f"mode {mode!r} does not match the problem "
                         f"({'has' if spec.has_exit else 'has no'} exit domain)")
    return mode


def solve_truncated(spec, x0, horizon: float, steps_per_unit: float,
                    reg: RegressionConfig = RegressionConfig(), seed: int = 0,
                    n_paths: int = 20_000, threads: int = 1, bmo: bool = False) -> BackwardSolution:
    """Simulate on ``[0, horizon]`` and solve with the truncated terminal convention."""
    grid = TimeGrid.with_density(horizon, steps_per_unit)
    ens = simulate(spec, grid, n_paths, seed, x0, threads=threads)
    if spec.has_exit:
        ens = first_exit(ens, spec.stopping, spec.diffusion, spec.drift_matrix)
    return solve_backward(spec, ens, reg, terminal=None, bmo=bmo)


@dataclass
class InfiniteSolution:
    """Truncated-horizon estimate of ``Y_0`` with its error budget.

    ``records`` holds one entry per grid density tried, each with the
    horizon, ``y0`` and the truncation bound ``beta e^{-lambda n}``.
    """

    y0: float
    ci: float
    n_used: float
    eps_target: float
    mode: str
    records: List[dict] = field(default_factory=list)
    weighted_gaps: dict = field(default_factory=dict)
    discretisation_gap: float = float("nan")
    steps_per_unit: float = 0.0
    clamp_fraction: float = 0.0
    clamp_flag: bool = False
    refined: bool = False
    solution: Optional[BackwardSolution] = None


def solve_random_horizon(spec, x0, eps: float, steps_per_unit: float = 16.0,
                         reg: RegressionConfig = RegressionConfig(), seed: int = 0,
                         n_paths: int = 20_000, mode: Optional[str] = None,
                         refine: bool = True, max_refinements: int = 3,
                         threads: int = 1, richardson: bool = False) -> InfiniteSolution:
    """Approximate the random/infinite-horizon ``Y_0`` at ``x0`` to within ``eps``.

    The horizon comes from :func:`required_horizon` (at least ``1/lambda``
    so that a nontrivial problem is always solved).  With ``refine=True`` the
    time step is halved, reusing the seed, until two successive values agree
    to ``eps/2``; the finer value is returned, or with ``richardson=True``
    the extrapolation ``2 y(2s) - y(s)`` of the last two densities, which
    removes the first-order time-step bias of the implicit step.
    """
    mode = _mode_for(spec, mode)
    bounds = theoretical_bounds(spec)
    lam = spec.constants.lam
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", HorizonWarning)
        n = required_horizon(bounds, lam, eps)
    horizon = float(max(n, 1.0 / lam))
    trunc = bounds.beta * math.exp(-lam * horizon)

    density = float(steps_per_unit)
    sol = solve_truncated(spec, x0, horizon, density, reg, seed, n_paths, threads)
    records = [{"n": horizon, "steps_per_unit": density, "y0": sol.y0, "ci": sol.y0_ci,
                "bound": trunc}]
    gap = float("nan")
    refined = False
    if refine:
        for _ in range(max_refinements):
            density *= 2
            finer = solve_truncated(spec, x0, horizon, density, reg, seed, n_paths, threads)
            records.append({"n": horizon, "steps_per_unit": density, "y0": finer.y0,
                            "ci": finer.y0_ci, "bound": trunc})
            gap = abs(finer.y0 - sol.y0)
            sol = finer
            if gap <= eps / 2:
                refined = True
                break
        if not refined:
            warnings.warn(f"discretisation gap {gap:.3e} still above eps/2 after "
                          f"{max_refinements} refinements", HorizonWarning)
    y0, ci = sol.y0, sol.y0_ci
    if richardson and len(records) > 1:
        y0 = 2 * records[-1]["y0"] - records[-2]["y0"]
        ci = 2 * records[-1]["ci"] + records[-2]["ci"]
    frac = sol.clamp_fraction
    flag = frac > 1e-3
    if flag:
        warnings.warn(f"clamp activations on {100 * frac:.3f}% of path-steps", HorizonWarning)
    return InfiniteSolution(y0, ci, horizon, eps, mode, records,
                            discretisation_gap=gap, steps_per_unit=density,
                            clamp_fraction=frac, clamp_flag=flag, refined=refined, solution=sol)


# ----------------------------------------------------------------------------
# Cauchy diagnostics
# ----------------------------------------------------------------------------


@dataclass
class CauchyTable:
    """Pairwise horizon gaps; ``rows`` carry exactly ``n, m, gap, bound, ci``."""

    rows: List[dict]
    tol_disc: List[float]
    slope: Optional[float]
    slope_points: int
    lam: float
    y0: List[float]
    ci: List[float]
    horizons: List[float]

    COLUMNS = ("n", "m", "gap", "bound", "ci")

    @property
    def rows_pass(self) -> bool:
        return all(r["gap"] <= r["bound"] + 3 * r["ci"] + t for r, t in zip(self.rows, self.tol_disc))

    @property
    def slope_pass(self) -> bool:
        """True when the slope is at most ``-0.75 lam`` or too few gaps clear the noise floor."""
        return self.slope is None or self.slope <= -0.75 * self.lam

    @property
    def passed(self) -> bool:
        return self.rows_pass and self.slope_pass

    def consecutive(self):
        idx = {h: j for j, h in enumerate(self.horizons)}
        return [r for r in self.rows if idx[r["m"]] == idx[r["n"]] + 1]


def _decay_slope(table_rows):
    pts = [(r["n"], r["gap"]) for r in table_rows if r["gap"] > 3 * r["ci"] and r["gap"] > 0]
    if len(pts) < 2:
        return None, len(pts)
    n, g = np.array(pts).T
    return float(np.polyfit(n, np.log(g), 1)[0]), len(pts)


def cauchy_table(spec, x0, horizons=None, reg: RegressionConfig = RegressionConfig(),
                 seed: int = 0, n_paths: int = 20_000, steps_per_unit: float = 16.0,
                 rate: str = "truncation", threads: int = 1) -> CauchyTable:
    """Solve at each horizon (same seed and step) and tabulate all pairwise gaps.

    ``rate="truncation"`` uses ``beta e^{-lambda n}``; ``rate="zero_terminal"``
    uses the sharper ``(K/lambda) e^{-lambda n}`` valid without exit data.
    The discrete-scheme allowance ``tol_disc`` is the difference between the
    implicit-step contraction ``(1 + lambda dt)^{-n/dt}`` and ``e^{-lambda n}``
    times the same constant.  The decay slope is fitted to consecutive
    gaps above ``3 ci``.
    """
    lam = spec.constants.lam
    if horizons is None:
        horizons = [2.0 / lam, 4.0 / lam, 6.0 / lam, 8.0 / lam]
    horizons = [float(h) for h in horizons]
    if len(horizons) < 2 or any(b <= a for a, b in zip(horizons, horizons[1:])):
        raise ValueError("horizons must be strictly increasing with at least two entries")
    bounds = theoretical_bounds(spec)
    if rate == "truncation":
        const = bounds.beta
    elif rate == "zero_terminal":
        if spec.has_exit:
            raise ValueError("zero-terminal rate requires a problem without exit domain")
        const = spec.constants.K / lam
    else:
        raise ValueError(f"unknown rate {rate!r}")
    y0, ci, dts = [], [], []
    for h in horizons:
        sol = solve_truncated(spec, x0, h, steps_per_unit, reg, seed, n_paths, threads)
        y0.append(sol.y0)
        ci.append(sol.y0_ci)
        dts.append(sol.grid.dt)
    rows, tol = [], []
    for (j, n), (l, m) in combinations(enumerate(horizons), 2):
        dt = dts[j]
        rows.append({"n": n, "m": m, "gap": abs(y0[j] - y0[l]),
                     "bound": const * math.exp(-lam * n), "ci": ci[j] + ci[l]})
        tol.append(const * max(0.0, (1 + lam * dt) ** (-n / dt) - math.exp(-lam * n)))
    table = CauchyTable(rows, tol, None, 0, lam, y0, ci, horizons)
    table.slope, table.slope_points = _decay_slope(table.consecutive())
    return table


# ----------------------------------------------------------------------------
# Weighted L2 gaps between two horizons
# ----------------------------------------------------------------------------


class WeightedGap(NamedTuple):
    y_gap: float
    z_gap: float


def _extend(sol, N):
    Y, Z = sol.Y, sol.Z
    P, N1 = Y.shape
    if N1 - 1 == N:
        return Y, Z
    Ye = np.empty((P, N + 1))
    Ye[:, :N1] = Y
    Ye[:, N1:] = Y[:, -1:]
    Ze = np.zeros((P, N + 1, Z.shape[2]))
    Ze[:, :N1] = Z
    Ze[:, N1 - 1] = 0.0
    return Ye, Ze


def weighted_l2_gap(solA: BackwardSolution, solB: BackwardSolution, weight: float) -> WeightedGap:
    """Monte Carlo ``E int e^{-2 w t} |dY|^2 dt`` and the same for ``Z``.

    Both solutions must live on a common grid prefix (same step, same paths).
    The shorter one is extended past its horizon by its last value and
    ``Z = 0``, which is the truncated convention ``Y^n_t = xi 1_{tau <= n}``.
    """
    ga, gb = solA.grid, solB.grid
    if not math.isclose(ga.dt, gb.dt, rel_tol=1e-12) or solA.Y.shape[0] != solB.Y.shape[0]:
        raise ValueError("grid mismatch: solutions need the same step and path count")
    short, long_ = (solA, solB) if ga.n_steps <= gb.n_steps else (solB, solA)
    Ns, N = short.grid.n_steps, long_.grid.n_steps
    if not np.array_equal(short.ensemble.X, long_.ensemble.X[:, :Ns + 1]):
        raise ValueError("grid mismatch: paths differ on the common prefix")
    dt = ga.dt
    Ys, Zs = _extend(short, N)
    t = np.arange(N) * dt
    w = np.exp(-2.0 * weight * t) * dt
    dy = (Ys[:, :N] - long_.Y[:, :N]) ** 2
    dz = np.sum((Zs[:, :N] - long_.Z[:, :N]) ** 2, axis=2)
    return WeightedGap(float(np.mean(dy @ w)), float(np.mean(dz @ w)))


def weighted_l2_bound(constants, n: float) -> float:
    """``e^{-2 lam n}(n beta^2 + (2/lam)(M + K/lam)^2)``, the weighted-space tail estimate."""
    b = theoretical_bounds(constants)
    lam = constants.lam
    return math.exp(-2 * lam * n) * (n * b.beta ** 2 + (2.0 / lam) * b.y_bound ** 2)
