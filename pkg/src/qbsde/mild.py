"""The value function ``v(x) = Y_0^x`` and checks of its mild-solution identities.

``evaluate_value`` samples ``v`` and ``g = grad v sigma`` at query points.
Between points the field is reconstructed with the polynomial basis used by
the regression solver; its interpolation error is estimated by leave-one-out
refits.  ``mild_residual`` then checks the semigroup fixed point

    v(x) = e^{-lam T} P_T v(x) + int_0^T e^{-lam t} P_t[F(., v, g) + lam v](x) dt

by fresh Monte Carlo, and ``identification_residual`` compares a path
solution ``(Y, Z)`` with ``(v(X), g(X))``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .forward import TimeGrid, simulate
from .gradient import solve_gradient_bsde
from .forward import simulate_variational
from .horizon import HorizonWarning, solve_random_horizon
from .model import theoretical_bounds
from .regression import RegressionConfig, fit
from .rng import derive_seed

__all__ = [
    "CoverageError",
    "ValueField",
    "evaluate_value",
    "MildResidual",
    "mild_residual",
    "identification_residual",
]


class CoverageError(RuntimeError):
    """Too many evaluations fall outside the region covered by a value field."""


def _default_degree(n_points, dim, cap=8):
    from .regression import _exponents
    q = 0
    while q < cap and len(_exponents(dim, q + 1)) <= n_points - 2:
        q += 1
    return q


@dataclass(eq=False)
class ValueField:
    """Sampled ``v`` and ``g = grad v sigma`` at ``points`` with per-point errors.

    Points that failed carry NaN and an entry in ``failures``.  Call
    :meth:`fit` (done by :func:`evaluate_value`) before evaluating between
    points.
    """

    points: np.ndarray
    v: np.ndarray
    g: np.ndarray
    ci: np.ndarray
    g_ci: np.ndarray
    failures: Dict[int, str] = field(default_factory=dict)
    degree: Optional[int] = None
    delta_v: float = float("nan")
    delta_g: float = float("nan")
    _vfit: object = None
    _gfit: object = None

    @classmethod
    def from_function(cls, points, v_fn, g_fn, degree=None):
        """Field from known ``v`` and ``g`` functions (used for exact checks)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        v = np.asarray(v_fn(pts), dtype=float)
        g = np.atleast_2d(np.asarray(g_fn(pts), dtype=float)).reshape(len(pts), -1)
        out = cls(pts, v, g, np.zeros(len(pts)), np.zeros_like(g), degree=degree)
        return out.fit()

    @property
    def ok(self):
        return np.isfinite(self.v) & np.all(np.isfinite(self.g), axis=1)

    @property
    def lower(self):
        return self.points[self.ok].min(axis=0)

    @property
    def upper(self):
        return self.points[self.ok].max(axis=0)

    def _cfg(self):
        return RegressionConfig(basis="poly", degree=self.degree, ridge=1e-12)

    def fit(self):
        ok = self.ok
        x = self.points[ok]
        if self.degree is None:
            self.degree = _default_degree(len(x), x.shape[1])
        cfg = self._cfg()
        self._vfit, _ = fit(x, self.v[ok], cfg)
        self._gfit, _ = fit(x, self.g[ok], cfg)
        self.delta_v, self.delta_g = self._leave_one_out(x, cfg)
        return self

    def _leave_one_out(self, x, cfg):
        n = len(x)
        if n <= len(self._vfit.coef) + 1:
            return 0.0, 0.0
        dv = dg = 0.0
        v, g = self.v[self.ok], self.g[self.ok]
        for j in range(n):
            keep = np.arange(n) != j
            mv, _ = fit(x[keep], v[keep], cfg)
            mg, _ = fit(x[keep], g[keep], cfg)
            dv = max(dv, abs(float(mv.predict(x[j:j + 1])[0, 0]) - v[j]))
            dg = max(dg, float(np.max(np.abs(mg.predict(x[j:j + 1])[0] - g[j]))))
        return dv, dg

    def covers(self, x):
        x = np.atleast_2d(x)
        return np.all((x >= self.lower - 1e-12) & (x <= self.upper + 1e-12), axis=1)

    def value(self, x):
        return self._vfit.predict(np.atleast_2d(x))[:, 0]

    def grad_sigma(self, x):
        return self._gfit.predict(np.atleast_2d(x))

    def to_rows(self):
        rows = []
        for j, p in enumerate(self.points):
            row = {f"x{i}": float(c) for i, c in enumerate(p)}
            row["v"] = float(self.v[j])
            row.update({f"g{i}": float(c) for i, c in enumerate(self.g[j])})
            row["ci"] = float(self.ci[j])
            rows.append(row)
        return rows


def evaluate_value(spec, points, eps: float = 0.01, reg: RegressionConfig = RegressionConfig(),
                   seed: int = 0, n_paths: int = 20_000, steps_per_unit: float = 16.0,
                   refine: bool = True, richardson: bool = True, degree: Optional[int] = None,
                   threads: int = 1) -> ValueField:
    """Evaluate ``v`` and ``grad v sigma`` at each query point.

    Every point reuses ``seed`` (common random numbers), so the field is
    smooth in ``x`` even at modest path counts.  ``g`` comes from the
    derivative equation along each coordinate direction on the finest
    ensemble; for problems with an exit domain it is taken from the
    derivative of the fitted ``v`` instead.  A failure at one point is
    recorded in ``failures`` and the others proceed.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != spec.state_dim or not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite with one column per state coordinate")
    if spec.has_exit and not np.all(spec.stopping.contains(pts)):
        raise ValueError("query points must lie inside the exit domain")
    J, d = pts.shape
    k = spec.noise_dim
    sigma = spec.diffusion
    v = np.full(J, np.nan)
    ci = np.full(J, np.nan)
    g = np.full((J, k), np.nan)
    g_ci = np.full((J, k), np.nan)
    failures = {}
    for j, x in enumerate(pts):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", HorizonWarning)
                sol = solve_random_horizon(spec, x, eps, steps_per_unit, reg, seed, n_paths,
                                           refine=refine, richardson=richardson, threads=threads)
            v[j], ci[j] = sol.y0, sol.ci
            if spec.has_exit:
                continue
            bsol = sol.solution
            grad = np.empty(d)
            gerr = np.empty(d)
            for c in range(d):
                e = np.zeros(d)
                e[c] = 1.0
                var = simulate_variational(spec, bsol.ensemble, e)
                gs = solve_gradient_bsde(spec, bsol.ensemble, bsol, var, reg)
                grad[c], gerr[c] = gs.u0, gs.ci
            g[j] = grad @ sigma
            g_ci[j] = np.abs(gerr) @ np.abs(sigma)
        except Exception as exc:  # keep going on the other points
            v[j] = np.nan
            failures[j] = f"{type(exc).__name__}: {exc}"
    if spec.has_exit:
        ok = np.isfinite(v)
        cfg = RegressionConfig(degree=degree if degree is not None else _default_degree(ok.sum(), d),
                               ridge=1e-12)
        model, _ = fit(pts[ok], v[ok], cfg)
        g[ok] = model.gradient(pts[ok])[:, 0, :] @ sigma
        g_ci[ok] = 0.0
    out = ValueField(pts, v, g, ci, g_ci, failures, degree=degree)
    if out.ok.sum() >= 2:
        out.fit()
    return out


@dataclass
class MildResidual:
    residual: float
    ci: float
    interp_tol: float
    v_x: float
    rhs: float
    extrapolated: float

    @property
    def passed(self) -> bool:
        return abs(self.residual) <= 3 * self.ci + self.interp_tol


def _exp_trapezoid(lam, dt, n):
    """Weights for ``int e^{-lam t} phi(t) dt`` with ``phi`` piecewise linear on the grid."""
    if lam * dt < 1e-8:
        w0 = w1 = 0.5 * dt
    else:
        e = math.exp(-lam * dt)
        w0 = (1 - e) / lam - (1 - e - lam * dt * e) / (lam ** 2 * dt)
        w1 = (1 - e - lam * dt * e) / (lam ** 2 * dt)
    t = np.arange(n + 1) * dt
    disc = np.exp(-lam * t)
    w = np.zeros(n + 1)
    w[:-1] += w0 * disc[:-1]
    w[1:] += w1 * disc[:-1]
    return w


def mild_residual(spec, x, T: float, field: ValueField, mc_paths: int = 100_000, seed: int = 1,
                  n_steps: int = 128, max_extrapolation: float = 0.05) -> MildResidual:
    """Monte Carlo check of the mild fixed-point identity at ``x`` on ``[0, T]``.

    The time integral uses exponentially fitted trapezoid weights (exact for
    piecewise-linear integrands, so constant fields give a zero residual to
    rounding).  ``interp_tol`` propagates the field's leave-one-out errors
    ``delta_v`` and ``delta_g`` through the identity using the data-driven
    Lipschitz constants ``L_y = sup|dF/dy + lam|`` and ``L_z = sup|grad_z F|``
    along the paths.

    Raises
    ------
    CoverageError
        If more than ``max_extrapolation`` of the evaluations fall outside
        the field's bounding box.
    """
    if spec.has_exit:
        raise ValueError("mild identity is checked for the infinite-horizon mode only")
    lam = spec.constants.lam
    grid = TimeGrid(T, n_steps)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ens = simulate(spec, grid, mc_paths, derive_seed(seed, 0), x)
    P, N1, d = ens.X.shape
    w = _exp_trapezoid(lam, grid.dt, n_steps)
    acc = np.zeros(P)
    outside = 0
    Ly = Lz = 0.0
    for i in range(N1):
        xi = ens.X[:, i]
        outside += int((~field.covers(xi)).sum())
        vi = field.value(xi)
        gi = field.grad_sigma(xi)
        phi = spec.generator(xi, vi, gi) + lam * vi
        acc += w[i] * phi
        Ly = max(Ly, float(np.max(np.abs(spec.generator_dy(xi, vi, gi) + lam))))
        Lz = max(Lz, float(np.max(np.linalg.norm(spec.generator_dz(xi, vi, gi), axis=1))))
    frac = outside / (P * N1)
    if frac > max_extrapolation:
        raise CoverageError(f"{100 * frac:.1f}% of evaluations extrapolate the value field")
    eT = math.exp(-lam * T)
    v_x = float(field.value(x[None])[0])
    per_path = eT * field.value(ens.X[:, -1]) + acc
    rhs = float(per_path.mean())
    ci = float(per_path.std(ddof=1) / math.sqrt(P))
    dv = 0.0 if not np.isfinite(field.delta_v) else field.delta_v
    dg = 0.0 if not np.isfinite(field.delta_g) else field.delta_g
    tol = dv * (1 + eT + (1 - eT) * Ly / lam) + dg * Lz * (1 - eT) / lam
    return MildResidual(v_x - rhs, ci, tol, v_x, rhs, frac)


def _stratified(x, coverage, count):
    """Indices of ``count`` states spread evenly (by first coordinate) over the central ``coverage`` mass."""
    mu = x.mean(axis=0)
    sd = np.maximum(x.std(axis=0), 1e-300)
    r = np.linalg.norm((x - mu) / sd, axis=1)
    keep = np.flatnonzero(r <= np.quantile(r, coverage))
    order = keep[np.argsort(x[keep, 0], kind="stable")]
    pick = np.unique(np.linspace(0, order.size - 1, min(count, order.size)).round().astype(int))
    return order[pick]


def identification_residual(spec, bsol, field: ValueField, trunc_tol: Optional[float] = None,
                            per_step: int = 256, coverage: float = 0.99,
                            quantiles=(0.5, 0.9, 0.99), max_extrapolation: float = 0.05) -> dict:
    """Compare ``Y`` with ``v(X)`` and ``Z`` with ``g(X)`` along the paths of ``bsol``.

    Only time indices with truncation error ``beta e^{-lam (T - t)}`` below
    ``trunc_tol`` (default ``0.5%`` of ``max(y_bound, beta)``) are used.  At
    each of them the sample is stratified over the central ``coverage``
    mass of the state distribution: ``per_step`` states evenly spaced along
    the first coordinate.  The regression solution is a least-squares
    projection under the law of ``X_t``, so its far tails carry no
    pointwise guarantee; the unrestricted sup over all active paths is
    still reported as ``y_sup_all`` and ``z_sup_all``.
    """
    bounds = theoretical_bounds(spec)
    lam = spec.constants.lam
    if trunc_tol is None:
        trunc_tol = 0.005 * max(bounds.y_bound, bounds.beta)
    grid = bsol.grid
    T = grid.horizon
    N = grid.n_steps
    t = grid.nodes
    usable = [i for i in range(N) if bounds.beta * math.exp(-lam * (T - t[i])) <= trunc_tol]
    if not usable:
        raise ValueError("horizon too short: no time index meets the truncation tolerance")
    e = bsol.ensemble.exits()
    y_err, z_err, steps = [], [], []
    y_all = z_all = 0.0
    outside = total = 0
    for i in usable:
        alive = np.flatnonzero(e > i)
        if alive.size == 0:
            continue
        X = bsol.ensemble.X[alive, i]
        cov = field.covers(X)
        outside += int((~cov).sum())
        total += alive.size
        alive, X = alive[cov], X[cov]
        if alive.size == 0:
            continue
        full_y = np.abs(bsol.Y[alive, i] - field.value(X))
        full_z = np.linalg.norm(bsol.Z[alive, i] - field.grad_sigma(X), axis=1)
        y_all = max(y_all, float(full_y.max()))
        z_all = max(z_all, float(full_z.max()))
        sel = _stratified(X, coverage, per_step) if i > 0 else np.arange(min(alive.size, 1))
        dy, dz = full_y[sel], full_z[sel]
        y_err.append(dy)
        z_err.append(dz)
        steps.append((i, float(dy.max()), float(dz.max())))
    frac = outside / max(total, 1)
    if frac > max_extrapolation:
        raise CoverageError(f"{100 * frac:.1f}% of sampled states lie outside the value field")
    ye = np.concatenate(y_err)
    ze = np.concatenate(z_err)
    return {
        "y_sup": float(ye.max()),
        "z_sup": float(ze.max()),
        "y_sup_all": y_all,
        "z_sup_all": z_all,
        "y_quantiles": {q: float(np.quantile(ye, q)) for q in quantiles},
        "z_quantiles": {q: float(np.quantile(ze, q)) for q in quantiles},
        "per_step": steps,
        "z_scale": float(np.max(np.linalg.norm(bsol.Z[:, usable], axis=2))),
        "extrapolated": frac,
        "steps_used": len(steps),
    }
