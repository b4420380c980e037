"""Directional derivative of ``Y`` with respect to the starting point.

The pair ``(U, V) = (grad_x Y h, grad_x Z h)`` solves a linear BSDE with
zero terminal value whose coefficients are the partial derivatives of the
generator along the base solution:

    psi = grad_x F . D,   a = dF/dy,   b = grad_z F,

where ``D = grad_x X h`` is the variational process.  It is solved on the
same ensemble as the base solution, so no fresh noise enters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .bsde import BackwardSolution, LinearCoeffs, solve_linear_backward
from .forward import PathEnsemble, TimeGrid, VariationalPaths, simulate, simulate_variational
from .horizon import solve_truncated
from .model import BoundSet, theoretical_bounds
from .regression import RegressionConfig

__all__ = [
    "GradientSolution",
    "solve_gradient_bsde",
    "gradient_pipeline",
    "FiniteDifference",
    "gradient_fd",
    "gradient_bound_check",
]


@dataclass(eq=False)
class GradientSolution:
    """``U[p, i]`` (derivative of ``Y``) and ``V[p, i]`` (derivative of ``Z``) along ``h``."""

    U: np.ndarray
    V: np.ndarray
    h: np.ndarray
    linear: BackwardSolution

    @property
    def u0(self) -> float:
        return float(self.U[:, 0].mean())

    @property
    def ci(self) -> float:
        return self.linear.y0_ci


def _linear_coeffs(spec, bsol: BackwardSolution, var: VariationalPaths, tol: float):
    X = bsol.ensemble.X
    P, N1, d = X.shape
    k = bsol.Z.shape[2]
    psi = np.empty((P, N1))
    a = np.empty((P, N1))
    b = np.empty((P, N1, k))
    # one node at a time: bounded memory, and generators that cache per batch
    # see exactly the (x, z) batches of the backward pass
    for i in range(N1):
        x, y, z = X[:, i], bsol.Y[:, i], bsol.Z[:, i]
        psi[:, i] = np.einsum("pd,pd->p", spec.generator_dx(x, y, z), var.D[:, i])
        a[:, i] = spec.generator_dy(x, y, z)
        b[:, i] = spec.generator_dz(x, y, z)
    lam = spec.constants.lam
    worst = float(a[:, :-1].max())
    if worst > -lam + tol:
        raise ValueError(f"dF/dy = {worst:.6g} exceeds -lambda = {-lam:.6g} on the data: "
                         "monotonicity violated")
    rho = spec.constants.C * float(np.linalg.norm(var.h))
    return LinearCoeffs(psi, a, b, rho)


def solve_gradient_bsde(spec, ensemble: PathEnsemble, bsol: BackwardSolution,
                        var: VariationalPaths, reg: RegressionConfig = RegressionConfig(),
                        tol: float = 1e-9) -> GradientSolution:
    """Solve the derivative equation with zero terminal value on ``ensemble``.

    The ``z`` argument of the partials is the clipped ``Z`` stored in
    ``bsol``, i.e. the one the base solver actually used.

    Raises
    ------
    ValueError
        If the problem has an exit domain (the derivative equation is only
        set up for the infinite-horizon mode), or ``dF/dy > -lambda + tol``
        at some sample.
    """
    if spec.has_exit:
        raise ValueError("gradient equation is only available without an exit domain")
    if bsol.ensemble is not ensemble and bsol.ensemble.X.shape != ensemble.X.shape:
        raise ValueError("base solution was computed on a different ensemble")
    coeffs = _linear_coeffs(spec, bsol, var, tol)
    lin = solve_linear_backward(coeffs, 0.0, ensemble, reg)
    return GradientSolution(lin.Y, lin.Z, var.h, lin)


def gradient_pipeline(spec, x0, h, horizon: float, steps_per_unit: float = 16.0,
                      reg: RegressionConfig = RegressionConfig(), seed: int = 0,
                      n_paths: int = 20_000, threads: int = 1):
    """Simulate, solve the base equation, then the derivative equation along ``h``.

    Returns ``(GradientSolution, BackwardSolution, VariationalPaths)``.
    """
    bsol = solve_truncated(spec, x0, horizon, steps_per_unit, reg, seed, n_paths, threads)
    var = simulate_variational(spec, bsol.ensemble, h)
    return solve_gradient_bsde(spec, bsol.ensemble, bsol, var, reg), bsol, var


class FiniteDifference(NamedTuple):
    value: float
    ci: float


def gradient_fd(spec, x0, h, delta: float, horizon: float, steps_per_unit: float = 16.0,
                reg: RegressionConfig = RegressionConfig(), seed: int = 0,
                n_paths: int = 20_000, threads: int = 1) -> FiniteDifference:
    """Central difference ``(y0(x0 + delta h) - y0(x0 - delta h)) / (2 delta)``.

    Both runs share seed and grid (common random numbers); the standard
    error is that of the pathwise difference.
    """
    if delta < 1e-8:
        raise ValueError("delta below 1e-8 is dominated by cancellation")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if not np.any(h):
        return FiniteDifference(0.0, 0.0)
    plus = solve_truncated(spec, x0 + delta * h, horizon, steps_per_unit, reg, seed, n_paths, threads)
    minus = solve_truncated(spec, x0 - delta * h, horizon, steps_per_unit, reg, seed, n_paths, threads)
    value = (plus.y0 - minus.y0) / (2 * delta)
    diff = (plus.Y[:, 1] - minus.Y[:, 1]) / (2 * delta)
    ci = float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
    return FiniteDifference(float(value), ci)


def gradient_bound_check(gsol: GradientSolution, bounds: BoundSet) -> float:
    """``gradient_bound |h| - max |U|``; nonnegative (up to discretisation) when the bound holds."""
    hn = float(np.linalg.norm(gsol.h))
    return bounds.gradient_bound * hn - float(np.max(np.abs(gsol.U)))
