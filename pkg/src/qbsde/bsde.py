"""Regression-based backward solvers on a simulated path ensemble.

For each grid index ``i`` (backwards) and every path still inside the
domain, the scheme computes

    E_i  = Ehat[Y_{i+1} | X_i]
    Z_i  = Ehat[(Y_{i+1} - E_i) dW_i | X_i] / dt
    Y_i  = E_i + dt F(X_i, Y_i, clip(Z_i))          (Picard in Y_i)

with ``Ehat`` a least-squares projection on a basis of ``X_i``.  Paths that
have left the domain keep ``Y`` frozen at the terminal value and ``Z = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .forward import NO_EXIT, PathEnsemble
from .model import theoretical_bounds
from .regression import RegressionConfig, fit

__all__ = [
    "PicardError",
    "BackwardSolution",
    "LinearCoeffs",
    "solve_backward",
    "solve_linear_backward",
    "bmo_estimate",
    "bmo_profile",
]


class PicardError(RuntimeError):
    def __init__(self, index, residual):
        super().__init__(f"Picard iteration did not converge at time index {index} "
                         f"(last update {residual:.3e})")
        self.index = index
        self.residual = residual


@dataclass(eq=False)
class BackwardSolution:
    """Per-path, per-node ``(Y, Z)`` with solver diagnostics.

    ``Y`` has shape ``(P, N+1)`` and ``Z`` ``(P, N+1, k)`` (``Z[:, N] = 0``).
    ``y0_ci`` is the Monte Carlo standard error of ``Y_0``.
    """

    Y: np.ndarray
    Z: np.ndarray
    picard_counts: np.ndarray
    ensemble: PathEnsemble
    y_bound: Optional[float] = None
    z_max: Optional[float] = None
    clamp_count: int = 0
    z_clip_count: int = 0
    bmo: Optional[float] = None
    active_steps: int = 0

    @property
    def grid(self):
        return self.ensemble.grid

    @property
    def y0(self) -> float:
        return float(self.Y[:, 0].mean())

    @property
    def y0_ci(self) -> float:
        P = self.Y.shape[0]
        if P < 2:
            return 0.0
        return float(self.Y[:, 1].std(ddof=1) / np.sqrt(P))

    @property
    def clamp_fraction(self) -> float:
        return self.clamp_count / max(self.active_steps, 1)


@dataclass(eq=False)
class LinearCoeffs:
    """Coefficients of the linear driver ``psi + a U + b . V``.

    ``psi`` and ``a`` have shape ``(P, N+1)``, ``b`` ``(P, N+1, k)``; ``rho`` is a
    deterministic envelope of ``|psi|`` (scalar or ``(N+1,)``).
    """

    psi: np.ndarray
    a: np.ndarray
    b: np.ndarray
    rho: object = None


def _terminal_values(ensemble, terminal, P):
    X_N = ensemble.X[:, -1]
    if terminal is None:
        return np.zeros(P)
    if callable(terminal):
        return np.asarray(terminal(X_N), dtype=float)
    return np.broadcast_to(np.asarray(terminal, dtype=float), (P,)).copy()


def _init_frozen(ensemble, Y, exit_values):
    """Freeze ``Y`` after exit; return the exit indices."""
    N = ensemble.grid.n_steps
    e = ensemble.exits()
    exited = e <= N
    if exited.any():
        idx = np.flatnonzero(exited)
        for p, ep in zip(idx, e[idx]):
            Y[p, ep:] = exit_values[p]
    return e


def _regress_step(x, ynext, dw, dt, reg):
    model, cond = fit(x, ynext, reg)
    zhat = model.project((ynext - cond)[:, None] * dw / dt)
    return cond, zhat


def _active(e, i, P):
    """Index of paths still inside the domain at node ``i`` (a slice when all are)."""
    alive = e > i
    if alive.all():
        return slice(None), P
    act = np.flatnonzero(alive)
    return act, act.size


def _clip_rows(z, z_max):
    nrm = np.linalg.norm(z, axis=1)
    over = nrm > z_max
    if over.any():
        z = z.copy()
        z[over] *= (z_max / nrm[over])[:, None]
    return z, int(over.sum())


def solve_backward(spec, ensemble: PathEnsemble, reg: RegressionConfig = RegressionConfig(),
                   terminal=None, clamp: bool = True, bmo: bool = True) -> BackwardSolution:
    """Solve the quadratic BSDE driven by ``spec.generator`` backwards on ``ensemble``.

    Parameters
    ----------
    spec : ProblemSpec
    ensemble : PathEnsemble
        Must carry exit indices when ``spec`` has an exit domain.
    reg : RegressionConfig
    terminal : None, float, array or callable
        Value at the last node for paths that did not exit.  ``None`` means
        zero, which is the truncated-horizon convention ``xi 1_{tau <= n}``.
    clamp : bool
        Clamp ``Y`` to ``[-y_bound, y_bound]`` and count activations.
    bmo : bool
        Also compute the BMO diagnostic.

    Raises
    ------
    PicardError
        When the implicit step fails to converge within ``reg.picard_max``.
    ValueError
        On a flagged ensemble, missing exit data, or a step size violating
        ``dt * sup|dF/dy| < 1/2``.
    """
    if ensemble.flagged:
        raise ValueError("ensemble contains aborted (non-finite) paths")
    if spec.has_exit and ensemble.exit_index is None:
        raise ValueError("spec has an exit domain but the ensemble has no exit indices")
    bounds = theoretical_bounds(spec)
    yb = bounds.y_bound
    z_max = reg.z_max if reg.z_max is not None else 10.0 * (1.0 + yb)
    X, dW = ensemble.X, ensemble.dW
    P, N1, _ = X.shape
    N = N1 - 1
    k = dW.shape[2]
    dt = ensemble.grid.dt

    Y = np.empty((P, N1))
    Z = np.zeros((P, N1, k))
    exit_vals = np.zeros(P)
    if spec.has_exit:
        e0 = ensemble.exits()
        ex = e0 <= N
        if ex.any():
            exit_vals[ex] = spec.terminal_fn(X[np.flatnonzero(ex), e0[ex]])
    e = _init_frozen(ensemble, Y, exit_vals)
    alive_end = e > N
    Y[alive_end, N] = _terminal_values(ensemble, terminal, P)[alive_end]

    counts = np.zeros(N, dtype=int)
    clamps = clips = active_steps = 0
    F = spec.generator
    for i in range(N - 1, -1, -1):
        act, n_act = _active(e, i, P)
        if n_act == 0:
            continue
        active_steps += n_act
        x = X[act, i]
        cond, zhat = _regress_step(x, Y[act, i + 1], dW[act, i], dt, reg)
        zc, nclip = _clip_rows(zhat, z_max)
        clips += nclip
        y = cond.copy()
        gy = spec.generator_dy(x, y, zc)
        if dt * np.max(np.abs(gy)) >= 0.5:
            raise ValueError(f"time step too large at index {i}: dt * sup|dF/dy| = "
                             f"{dt * np.max(np.abs(gy)):.3f} >= 1/2")
        for it in range(1, reg.picard_max + 1):
            y_new = cond + dt * F(x, y, zc)
            upd = np.max(np.abs(y_new - y))
            y = y_new
            if upd <= reg.picard_tol * (1.0 + np.max(np.abs(y))):
                break
        else:
            raise PicardError(i, upd)
        counts[i] = it
        if clamp:
            over = np.abs(y) > yb
            clamps += int(over.sum())
            y = np.clip(y, -yb, yb)
        Y[act, i] = y
        Z[act, i] = zc
    sol = BackwardSolution(Y, Z, counts, ensemble, yb, z_max, clamps, clips,
                           active_steps=active_steps)
    if bmo:
        sol.bmo = bmo_estimate(sol, reg)
    return sol


def solve_linear_backward(coeffs: LinearCoeffs, terminal, ensemble: PathEnsemble,
                          reg: RegressionConfig = RegressionConfig()) -> BackwardSolution:
    """Solve ``U_t = xi + int 1_{s<=tau}(a U + b V + psi) ds - int V dW``.

    The implicit step is linear in ``U`` and is solved in closed form, i.e.
    the Picard map converges in a single iteration.  ``terminal`` gives the
    per-path value at exit (or at the last node for surviving paths).
    """
    X, dW = ensemble.X, ensemble.dW
    P, N1, _ = X.shape
    N = N1 - 1
    k = dW.shape[2]
    dt = ensemble.grid.dt
    term = np.broadcast_to(np.asarray(terminal, dtype=float), (P,)).copy()
    U = np.empty((P, N1))
    V = np.zeros((P, N1, k))
    e = _init_frozen(ensemble, U, term)
    alive_end = e > N
    U[alive_end, N] = term[alive_end]
    counts = np.zeros(N, dtype=int)
    active_steps = 0
    for i in range(N - 1, -1, -1):
        act, n_act = _active(e, i, P)
        if n_act == 0:
            continue
        active_steps += n_act
        cond, vhat = _regress_step(X[act, i], U[act, i + 1], dW[act, i], dt, reg)
        a = coeffs.a[act, i]
        drive = coeffs.psi[act, i] + np.einsum("nk,nk->n", coeffs.b[act, i], vhat)
        U[act, i] = (cond + dt * drive) / (1.0 - dt * a)
        V[act, i] = vhat
        counts[i] = 1
    return BackwardSolution(U, V, counts, ensemble, active_steps=active_steps)


def bmo_profile(sol: BackwardSolution, reg: RegressionConfig = RegressionConfig()) -> np.ndarray:
    """Per-node max over samples of ``Ehat[sum_{j>=i} |Z_j|^2 dt | X_i]``."""
    ens = sol.ensemble
    X = ens.X
    P, N1, _ = X.shape
    N = N1 - 1
    dt = ens.grid.dt
    sq = np.sum(sol.Z[:, :N] ** 2, axis=2) * dt
    tail = np.cumsum(sq[:, ::-1], axis=1)[:, ::-1]
    e = ens.exits()
    prof = np.zeros(N)
    for i in range(N):
        act, n_act = _active(e, i, P)
        if n_act == 0:
            continue
        _, fitted = fit(X[act, i], tail[act, i], reg)
        prof[i] = max(0.0, float(np.max(fitted)))
    return prof


def bmo_estimate(sol: BackwardSolution, reg: RegressionConfig = RegressionConfig()) -> float:
    """Numerical surrogate for the squared BMO norm of ``int Z dW`` (diagnostic only)."""
    prof = bmo_profile(sol, reg)
    return float(prof.max()) if prof.size else 0.0
