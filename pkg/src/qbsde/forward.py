"""Forward SDE simulation in mild (exponential-Euler) form.

One step of size ``dt`` reads

    X_{i+1} = e^{dt A} (X_i + dt b(X_i) + sigma dW_i),

which is exact for the linear part and reduces to the flow of ``A`` when
``b = 0`` and ``sigma = 0``.  Controlled runs add ``dt * sigma r(X_i, u_i)``
inside the bracket.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm

from .rng import bridge_uniforms, brownian_increments

__all__ = [
    "NO_EXIT",
    "TimeGrid",
    "PathEnsemble",
    "VariationalPaths",
    "PolicyError",
    "simulate",
    "simulate_variational",
    "first_exit",
    "simulate_controlled",
]

NO_EXIT = np.iinfo(np.int64).max
"""Exit-index sentinel for paths that stay in the domain on the whole grid."""


class PolicyError(RuntimeError):
    """A feedback or control source failed at some visited state."""

    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise ValueError("TimeGrid needs n_steps >= 1")
        if not self.horizon > 0:
            raise ValueError("TimeGrid needs a positive horizon")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @classmethod
    def with_density(cls, horizon: float, steps_per_unit: float) -> "TimeGrid":
        return cls(horizon, max(1, int(round(horizon * steps_per_unit))))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Simulated states ``X[p, i]`` and the increments ``dW[p, i]`` that drove them."""

    X: np.ndarray
    dW: np.ndarray
    seed: int
    grid: TimeGrid
    x0: np.ndarray
    aborted: np.ndarray
    exit_index: Optional[np.ndarray] = None
    controls: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def flagged(self) -> bool:
        return bool(self.aborted.any())

    def exits(self) -> np.ndarray:
        if self.exit_index is None:
            return np.full(self.n_paths, NO_EXIT, dtype=np.int64)
        return self.exit_index


@dataclass(frozen=True, eq=False)
class VariationalPaths:
    """Directional derivative ``D[p, i]`` of ``X`` w.r.t. its initial point along ``h``."""

    D: np.ndarray
    h: np.ndarray


def _step_matrix(A, dt):
    return expm(dt * A)


def _run(A, drift_fn, sigma, grid, x0, dW, control=None, r=None):
    """Shared stepping loop; ``control(i, x)`` returns ``u`` for the active step."""
    P = dW.shape[0]
    N = grid.n_steps
    d = A.shape[0]
    dt = grid.dt
    E = _step_matrix(A, dt)
    X = np.empty((P, N + 1, d))
    X[:, 0] = x0
    aborted = np.zeros(P, dtype=bool)
    U = None
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(N):
            x = X[:, i]
            noise = dW[:, i]
            if control is not None:
                u = control(i, x)
                if U is None:
                    U = np.empty((P, N, u.shape[1]))
                U[:, i] = u
                noise = noise + dt * r(x, u)
            X[:, i + 1] = (x + dt * drift_fn(x) + noise @ sigma.T) @ E.T
            bad = ~np.all(np.isfinite(X[:, i + 1]), axis=1)
            if bad.any():
                aborted |= bad
                X[aborted, i + 1] = np.nan
    return X, aborted, U


def simulate(spec, grid: TimeGrid, n_paths: int, seed: int, x0, threads: int = 1) -> PathEnsemble:
    """Simulate ``n_paths`` forward paths from ``x0`` on ``grid``.

    Results are a deterministic function of ``(seed, n_paths, grid, x0)``;
    ``threads`` only parallelises noise generation.  Paths that overflow are
    set to NaN from the first non-finite step on and the ensemble is flagged.
    """
    if int(n_paths) < 1:
        raise ValueError("n_paths must be >= 1")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (spec.state_dim,):
        raise ValueError(f"x0 must have shape ({spec.state_dim},)")
    dW = brownian_increments(seed, int(n_paths), grid.n_steps, spec.noise_dim, grid.dt, threads)
    X, aborted, _ = _run(spec.drift_matrix, spec.drift_fn, spec.diffusion, grid, x0, dW)
    return PathEnsemble(X, dW, int(seed), grid, x0, aborted)


def simulate_variational(spec, ensemble: PathEnsemble, h) -> VariationalPaths:
    """Integrate ``D_{i+1} = e^{dt A}(D_i + dt Db(X_i) D_i)`` with ``D_0 = h`` pathwise.

    No fresh noise enters because ``sigma`` is constant.
    """
    h = np.atleast_1d(np.asarray(h, dtype=float))
    d = spec.state_dim
    if h.shape != (d,):
        raise ValueError(f"direction h must have shape ({d},), got {h.shape}")
    grid = ensemble.grid
    dt = grid.dt
    E = _step_matrix(spec.drift_matrix, dt)
    P, N = ensemble.n_paths, grid.n_steps
    D = np.empty((P, N + 1, d))
    D[:, 0] = h
    for i in range(N):
        Di = D[:, i]
        J = spec.drift_jac(ensemble.X[:, i])
        D[:, i + 1] = (Di + dt * np.einsum("nij,nj->ni", J, Di)) @ E.T
    return VariationalPaths(D, h)


def first_exit(ensemble: PathEnsemble, domain, diffusion=None, drift_matrix=None) -> PathEnsemble:
    """Fill ``exit_index`` with the first grid index outside ``domain``.

    Paths that never leave get :data:`NO_EXIT`; ``domain=None`` means the
    whole space.  Without ``diffusion`` exit is detected on grid nodes only,
    which biases exit times late by ``O(sqrt(dt))``.  Passing the diffusion
    matrix (and ``drift_matrix`` when nonzero) also flags paths whose
    Brownian bridge crosses a face between two interior nodes, using the
    half-space crossing probability ``exp(-2 d_i d_{i+1} / (s^2 dt))`` against
    uniforms from the ensemble's seed.  Such paths exit at the later node.
    """
    P, N1, d = ensemble.X.shape
    if domain is None:
        e = np.full(P, NO_EXIT, dtype=np.int64)
        return dataclasses.replace(ensemble, exit_index=e)
    inside = domain.contains(ensemble.X.reshape(-1, d)).reshape(P, N1)
    outside = ~inside
    if diffusion is not None:
        dt = ensemble.grid.dt
        S = np.atleast_2d(np.asarray(diffusion, dtype=float))
        E = _step_matrix(np.zeros((d, d)) if drift_matrix is None else drift_matrix, dt)
        cov = E @ S @ S.T @ E.T
        dist, var = domain.face_distances(ensemble.X.reshape(-1, d), cov)
        dist = dist.reshape(P, N1, -1)
        var = var.reshape(P, N1, -1)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            expo = -2.0 * dist[:, :-1] * dist[:, 1:] / (var[:, :-1] * dt)
            p_face = np.where(var[:, :-1] > 0, np.exp(expo), 0.0)
        survive = np.prod(1.0 - p_face, axis=2)
        u = bridge_uniforms(ensemble.seed, P, N1 - 1)
        crossed = inside[:, :-1] & inside[:, 1:] & (u > survive)
        outside = outside.copy()
        outside[:, 1:] |= crossed
    hit = outside.any(axis=1)
    e = np.where(hit, np.argmax(outside, axis=1), NO_EXIT).astype(np.int64)
    return dataclasses.replace(ensemble, exit_index=e)


def _control_source(source, n_paths, grid):
    """Normalise a control source to ``control(i, x) -> u``."""
    if callable(source):
        def control(i, x):
            try:
                with np.errstate(all="ignore"):
                    u = np.asarray(source(x), dtype=float)
            except PolicyError:
                raise
            except Exception as exc:
                raise PolicyError(f"policy evaluation failed at step {i}: {exc}", step=i) from exc
            if u.ndim == 1:
                u = u[:, None]
            bad = ~np.all(np.isfinite(u), axis=1) & np.all(np.isfinite(x), axis=1)
            if bad.any():
                j = int(np.argmax(bad))
                raise PolicyError(f"policy returned a non-finite control at step {i}, state {x[j]}",
                                  state=x[j].copy(), step=i)
            return u
        return control
    arr = np.asarray(source, dtype=float)
    if arr.ndim <= 1:
        u0 = np.atleast_1d(arr)
        return lambda i, x: np.broadcast_to(u0, (x.shape[0], u0.size))
    if arr.ndim == 3 and arr.shape[:2] == (n_paths, grid.n_steps):
        return lambda i, x: arr[:, i]
    raise ValueError("control source must be callable, a constant vector or a (P, N, m) array")


def simulate_controlled(ctrl, source, grid: TimeGrid, n_paths: int, seed: int, x0,
                        threads: int = 1) -> PathEnsemble:
    """Simulate the controlled state equation and record the controls used.

    ``ctrl`` supplies ``drift_matrix``, ``drift_fn``, ``diffusion`` and ``r``;
    ``source`` is a feedback ``u(x)``, a constant control or a ``(P, N, m)``
    open-loop array.  With the same seed the noise equals that of
    :func:`simulate`.
    """
    if int(n_paths) < 1:
        raise ValueError("n_paths must be >= 1")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    control = _control_source(source, int(n_paths), grid)
    dW = brownian_increments(seed, int(n_paths), grid.n_steps, ctrl.noise_dim, grid.dt, threads)
    X, aborted, U = _run(ctrl.drift_matrix, ctrl.drift_fn, ctrl.diffusion, grid, x0, dW,
                         control=control, r=ctrl.r)
    return PathEnsemble(X, dW, int(seed), grid, x0, aborted, controls=U)
