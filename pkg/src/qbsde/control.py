"""Optimal control through the Hamiltonian generator.

For a running cost ``g(x, u) >= 0`` and a control entering the noise
channel through ``r(x, u)``, the Hamiltonian

    F(x, y, z) = inf_{u in U} { g(x, u) + z . r(x, u) } - lam y

is the generator whose BSDE solution gives the value function ``v``.  The
minimiser, restricted to the ball of radius ``C_gamma (1 + |z|)``, yields the
feedback ``u(x) = gamma(x, grad v(x) sigma)``.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .forward import PolicyError, TimeGrid, simulate_controlled
from .model import Ball, Box, Constants, ProblemSpec, WholeSpace, _zero_drift, _zero_jac

__all__ = [
    "ControlSpec",
    "ArgminResult",
    "SelectionBoundError",
    "hamiltonian_argmin",
    "hamiltonian_problem",
    "hamiltonian_fd_check",
    "FeedbackPolicy",
    "synthesize_policy",
    "CostEstimate",
    "cost_estimate",
    "FundamentalRelation",
    "fundamental_relation_check",
    "ClosedLoop",
    "closed_loop_run",
]


class SelectionBoundError(AssertionError):
    """A selected control violated ``|gamma(x, z)| <= C_gamma (1 + |z|)``."""


@dataclass(frozen=True, eq=False)
class ControlSpec:
    """Controlled state equation ``dX = (AX + b(X)) dt + sigma (dW + r(X, u) dt)`` and cost data.

    ``r`` maps ``(x (n, d), u (n, m))`` to ``(n, k)`` with Jacobians ``r_du``
    ``(n, k, m)`` and ``r_dx`` ``(n, k, d)``; ``g`` maps to ``(n,)`` with
    gradients ``g_du`` ``(n, m)`` and ``g_dx`` ``(n, d)``.  ``constants``
    describes the resulting Hamiltonian generator; its ``lam`` is the
    discount rate.  ``coercivity = (R, c)`` means ``g >= c |u|^2`` for
    ``|u| >= R``; ``C_r`` and ``C_g`` bound ``|r| <= C_r (1 + |u|)`` and
    ``g <= C_g (1 + |u|^2)``.
    """

    drift_matrix: np.ndarray
    diffusion: np.ndarray
    control_dim: int
    r: Callable
    r_du: Callable
    r_dx: Callable
    g: Callable
    g_du: Callable
    g_dx: Callable
    constants: Constants
    drift_fn: Optional[Callable] = None
    drift_jac: Optional[Callable] = None
    control_set: object = None
    coercivity: tuple = (1.0, 1.0)
    C_r: float = 1.0
    C_g: float = 1.0
    u0: Optional[np.ndarray] = None
    C_gamma: Optional[float] = None
    name: str = "control"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.drift_matrix, dtype=float))
        S = np.atleast_2d(np.asarray(self.diffusion, dtype=float))
        if A.shape[0] != A.shape[1] or S.shape[0] != A.shape[0]:
            raise ValueError("drift_matrix must be (d, d) and diffusion (d, k)")
        object.__setattr__(self, "drift_matrix", A)
        object.__setattr__(self, "diffusion", S)
        if self.drift_fn is None:
            object.__setattr__(self, "drift_fn", _zero_drift)
            object.__setattr__(self, "drift_jac", _zero_jac)
        if isinstance(self.control_set, WholeSpace):
            object.__setattr__(self, "control_set", None)
        u0 = np.zeros(self.control_dim) if self.u0 is None else np.atleast_1d(np.asarray(self.u0, float))
        if u0.shape != (self.control_dim,):
            raise ValueError("u0 must have shape (control_dim,)")
        if self.control_set is not None and not _in_set(self.control_set, u0[None])[0]:
            raise ValueError("fallback control u0 must lie in the control set")
        object.__setattr__(self, "u0", u0)
        if self.C_gamma is None:
            object.__setattr__(self, "C_gamma", float(self.C_r) + 1.0)
        self.constants.check()

    @property
    def state_dim(self) -> int:
        return self.drift_matrix.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.diffusion.shape[1]

    @property
    def lam(self) -> float:
        return self.constants.lam

    def check_invariants(self, sample_count: int = 4096, seed: int = 0, x_half: float = 5.0):
        """Sampled audit of ``g >= 0``, coercivity on ``|u| in [R, 10R]`` and the growth of ``r``.

        Returns ``{name: worst_violation}``; nonpositive means satisfied.
        """
        rng = np.random.default_rng(seed)
        d, m = self.state_dim, self.control_dim
        R, c = self.coercivity
        x = rng.uniform(-x_half, x_half, (sample_count, d))
        u = rng.uniform(-10 * R, 10 * R, (sample_count, m))
        dirs = rng.standard_normal((sample_count, m))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        uc = dirs * rng.uniform(R, 10 * R, (sample_count, 1))
        nu = np.linalg.norm(u, axis=1)
        return {
            "g_nonnegative": float(np.max(-self.g(x, u))),
            "coercivity": float(np.max(c * np.sum(uc ** 2, axis=1) - self.g(x, uc))),
            "r_growth": float(np.max(np.linalg.norm(self.r(x, u), axis=1) - self.C_r * (1 + nu))),
        }


def _in_set(S, u, tol=1e-12):
    if S is None:
        return np.ones(u.shape[0], dtype=bool)
    if isinstance(S, Box):
        return np.all((u >= S.lower - tol) & (u <= S.upper + tol), axis=1)
    return np.linalg.norm(u - S.center, axis=1) <= S.radius + tol


def _ball_proj(u, radius):
    nrm = np.linalg.norm(u, axis=1, keepdims=True)
    return u * np.minimum(1.0, radius[:, None] / np.maximum(nrm, 1e-300))


def _project(S, u, radius, iters=60):
    """Projection onto ``S`` intersected with the centred ball, by Dykstra's algorithm."""
    if S is None:
        return _ball_proj(u, radius)
    x = u.copy()
    p = np.zeros_like(u)
    q = np.zeros_like(u)
    for _ in range(iters):
        y = S.project(x + p)
        p = x + p - y
        x_new = _ball_proj(y + q, radius)
        q = y + q - x_new
        if np.max(np.abs(x_new - x)) < 1e-14:
            x = x_new
            break
        x = x_new
    return x


@dataclass
class ArgminResult:
    F_value: np.ndarray
    u_star: np.ndarray
    h_value: np.ndarray
    radius: np.ndarray
    converged: np.ndarray


_START_CACHE = {}


def _starts(m, n_starts=16):
    key = (m, n_starts)
    if key not in _START_CACHE:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pts = qmc.Sobol(m, scramble=False).random(n_starts)
        _START_CACHE[key] = 2.0 * pts - 1.0
    return _START_CACHE[key]


def hamiltonian_argmin(x, y, z, ctrl: ControlSpec, n_starts: int = 16, max_iter: int = 200,
                       tol: float = 1e-10, grid_points: int = 201) -> ArgminResult:
    """Minimise ``g(x, u) + z . r(x, u)`` over ``U`` within radius ``C_gamma (1 + |z|)``.

    Vectorised over rows of ``x`` ``(n, d)``, ``y`` ``(n,)``, ``z`` ``(n, k)``.
    Projected gradient with Armijo backtracking runs from ``n_starts``
    unscrambled Sobol points scaled to the search ball; the start with the
    smallest value wins, ties (relative ``1e-12``) going to the lowest
    index.  Rows where no start converged also try a coarse grid
    (``m <= 2``).  If ``u0`` lies outside the search ball, the radius is
    enlarged to include it, with a warning.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    y = np.broadcast_to(np.asarray(y, dtype=float), (x.shape[0],))
    n, m = x.shape[0], ctrl.control_dim
    S = ctrl.control_set
    radius = ctrl.C_gamma * (1.0 + np.linalg.norm(z, axis=1))
    u0n = float(np.linalg.norm(ctrl.u0))
    if np.any(radius < u0n):
        warnings.warn("search radius enlarged to contain the fallback control u0")
        radius = np.maximum(radius, u0n)
    st = _starts(m, n_starts)
    s = st.shape[0]
    X = np.repeat(x, s, axis=0)
    Zr = np.repeat(z, s, axis=0)
    rad = np.repeat(radius, s)
    U = _project(S, (st[None] * radius[:, None, None]).reshape(n * s, m), rad)

    full = slice(None)

    def phi(u, rows=full):
        return ctrl.g(X[rows], u) + np.einsum("nk,nk->n", Zr[rows], ctrl.r(X[rows], u))

    def grad(u, rows=full):
        return ctrl.g_du(X[rows], u) + np.einsum("nk,nkm->nm", Zr[rows], ctrl.r_du(X[rows], u))

    val = phi(U)
    step = np.ones(n * s)
    active = np.ones(n * s, dtype=bool)
    conv = np.zeros(n * s, dtype=bool)
    for _ in range(max_iter):
        ridx = np.flatnonzero(active)
        if ridx.size == 0:
            break
        rows = full if ridx.size == n * s else ridx
        u = U[rows]
        gr = grad(u, rows)
        t = step[rows]
        for _ in range(40):
            cand = _project(S, u - t[:, None] * gr, rad[rows])
            cv = phi(cand, rows)
            dec = np.sum((cand - u) ** 2, axis=1)
            ok = cv <= val[rows] - 1e-4 * dec / t
            if ok.all():
                break
            t = np.where(ok, t, 0.5 * t)
        move = np.sqrt(dec)
        accept = cv <= val[rows]
        U[ridx[accept]] = cand[accept]
        val[ridx[accept]] = cv[accept]
        step[rows] = np.minimum(2.0 * t, 1e3)
        done = move <= tol * (1.0 + np.linalg.norm(u, axis=1))
        conv[ridx[done]] = True
        active[ridx[done]] = False
    V = val.reshape(n, s)
    best = V.min(axis=1)
    near = V <= best[:, None] + 1e-12 * (1.0 + np.abs(best[:, None]))
    pick = np.argmax(near, axis=1)
    u_star = U.reshape(n, s, m)[np.arange(n), pick]
    h = V[np.arange(n), pick]
    converged = conv.reshape(n, s).any(axis=1)
    if (~converged).any() and m <= 2:
        bad = np.flatnonzero(~converged)
        ug, hg = _grid_search(ctrl, x[bad], z[bad], radius[bad], grid_points)
        better = hg < h[bad]
        u_star[bad[better]] = ug[better]
        h[bad[better]] = hg[better]
    return ArgminResult(h - ctrl.lam * y, u_star, h, radius, converged)


def _grid_search(ctrl, x, z, radius, points):
    m = ctrl.control_dim
    ax = np.linspace(-1.0, 1.0, points if m == 1 else int(math.sqrt(points * 50)))
    cloud = np.array(np.meshgrid(*([ax] * m))).reshape(m, -1).T
    out_u = np.empty((x.shape[0], m))
    out_h = np.empty(x.shape[0])
    for j in range(x.shape[0]):
        cand = _project(ctrl.control_set, cloud * radius[j], np.full(len(cloud), radius[j]))
        xx = np.repeat(x[j:j + 1], len(cand), axis=0)
        val = ctrl.g(xx, cand) + ctrl.r(xx, cand) @ z[j]
        i = int(np.argmin(val))
        out_u[j], out_h[j] = cand[i], val[i]
    return out_u, out_h


def hamiltonian_problem(ctrl: ControlSpec, chunk: int = 8192, cache_entries: int = 1024,
                        **argmin_kw) -> ProblemSpec:
    """The Hamiltonian as a :class:`ProblemSpec` generator.

    Partials come from the envelope theorem at the minimiser:
    ``F_z = r(x, u*)``, ``F_y = -lam`` and ``F_x = g_x(x, u*) + z . r_x(x, u*)``.
    The minimiser does not depend on ``y``; results are cached per ``(x, z)``
    batch (keyed by content, least recently used first out), so Picard
    sweeps and the derivative-equation coefficients reuse the minimisations
    of the backward pass.  Large batches are minimised in chunks of
    ``chunk`` rows to bound memory.
    """
    lam = ctrl.lam
    cache = OrderedDict()

    def solve(x, z):
        x = np.ascontiguousarray(x, dtype=float)
        z = np.ascontiguousarray(z, dtype=float)
        key = hashlib.blake2b(x.tobytes() + b"|" + z.tobytes() + repr((x.shape, z.shape)).encode(),
                              digest_size=16).digest()
        if key in cache:
            cache.move_to_end(key)
            return cache[key]
        n = x.shape[0]
        parts = [hamiltonian_argmin(x[a:a + chunk], np.zeros(min(chunk, n - a)), z[a:a + chunk],
                                    ctrl, **argmin_kw) for a in range(0, n, chunk)]
        res = ArgminResult(*(np.concatenate([getattr(p, f) for p in parts])
                             for f in ("F_value", "u_star", "h_value", "radius", "converged")))
        cache[key] = res
        if len(cache) > cache_entries:
            cache.popitem(last=False)
        return res

    def F(x, y, z):
        return solve(x, z).h_value - lam * y

    def Fz(x, y, z):
        return ctrl.r(x, solve(x, z).u_star)

    def Fx(x, y, z):
        u = solve(x, z).u_star
        return ctrl.g_dx(x, u) + np.einsum("nk,nkd->nd", z, ctrl.r_dx(x, u))

    return ProblemSpec(
        ctrl.drift_matrix, ctrl.diffusion,
        generator=F, generator_dx=Fx,
        generator_dy=lambda x, y, z: np.full(np.shape(y), -lam),
        generator_dz=Fz,
        constants=ctrl.constants,
        drift_fn=ctrl.drift_fn, drift_jac=ctrl.drift_jac,
        name=f"hamiltonian[{ctrl.name}]",
    )


def hamiltonian_fd_check(ctrl: ControlSpec, sample_count: int = 64, seed: int = 0,
                         h: float = 1e-5, z_half: float = 3.0) -> float:
    """Largest gap between the envelope ``F_z`` and a central difference in ``z``."""
    spec = hamiltonian_problem(ctrl)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3, 3, (sample_count, ctrl.state_dim))
    z = rng.uniform(-z_half, z_half, (sample_count, ctrl.noise_dim))
    y = np.zeros(sample_count)
    Fz = spec.generator_dz(x, y, z)
    worst = 0.0
    for j in range(ctrl.noise_dim):
        e = np.zeros(ctrl.noise_dim)
        e[j] = h
        fd = (spec.generator(x, y, z + e) - spec.generator(x, y, z - e)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fd - Fz[:, j]))))
    return worst


# ----------------------------------------------------------------------------
# Feedback policy
# ----------------------------------------------------------------------------


class FeedbackPolicy:
    """``u(x) = gamma(x, g(x))`` with ``g = grad v sigma`` read from a value field.

    Inputs are quantised to ``quantum`` before evaluation, so the policy is
    a deterministic function of the quantised state.  Results are memoised
    per quantised state for batches up to ``cache_limit`` rows; larger
    batches are evaluated directly, which gives the same values.  Every
    evaluation is checked against ``|u| <= C_gamma (1 + |g|)``.
    """

    def __init__(self, ctrl: ControlSpec, field, quantum: float = 1e-9, cache_limit: int = 4096,
                 argmin_kw: Optional[dict] = None):
        self.ctrl = ctrl
        self.field = field
        self.quantum = quantum
        self.cache_limit = cache_limit
        self.argmin_kw = dict(argmin_kw or {})
        self.cache = {}
        self.evaluations = 0
        self.max_bound_ratio = 0.0
        self.converged_fraction_num = 0

    def _compute(self, xq):
        v = self.field.value(xq)
        g = self.field.grad_sigma(xq)
        res = hamiltonian_argmin(xq, v, g, self.ctrl, **self.argmin_kw)
        bound = self.ctrl.C_gamma * (1.0 + np.linalg.norm(g, axis=1))
        bound = np.maximum(bound, res.radius)
        nrm = np.linalg.norm(res.u_star, axis=1)
        self.evaluations += xq.shape[0]
        self.converged_fraction_num += int(res.converged.sum())
        if nrm.size:
            self.max_bound_ratio = max(self.max_bound_ratio,
                                       float(np.max(nrm / (self.ctrl.C_gamma * (1.0 + np.linalg.norm(g, axis=1))))))
        if np.any(nrm > bound * (1 + 1e-12) + 1e-12):
            j = int(np.argmax(nrm - bound))
            raise SelectionBoundError(f"|u| = {nrm[j]:.6g} exceeds C_gamma (1 + |z|) = {bound[j]:.6g} "
                                      f"at x = {xq[j]}")
        return res.u_star

    @property
    def converged_fraction(self) -> float:
        return self.converged_fraction_num / max(self.evaluations, 1)

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not np.all(np.isfinite(x)):
            j = int(np.argmax(~np.all(np.isfinite(x), axis=1)))
            raise PolicyError(f"policy evaluated at a non-finite state {x[j]}", state=x[j].copy())
        xq = np.round(x / self.quantum) * self.quantum
        if x.shape[0] > self.cache_limit:
            return self._compute(xq)
        keys = [row.tobytes() for row in xq]
        missing = [j for j, key in enumerate(keys) if key not in self.cache]
        if missing:
            idx = np.array(missing)
            u = self._compute(xq[idx])
            for j, uj in zip(missing, u):
                self.cache[keys[j]] = uj
        return np.array([self.cache[key] for key in keys])

    def table(self, grid):
        """Rows ``(x..., u...)`` on a grid of states, for export."""
        pts = np.atleast_2d(np.asarray(grid, dtype=float))
        if pts.shape[0] == 1 and self.ctrl.state_dim == 1:
            pts = pts.T
        u = self(pts)
        return [{**{f"x{i}": float(c) for i, c in enumerate(p)},
                 **{f"u{i}": float(c) for i, c in enumerate(uu)}} for p, uu in zip(pts, u)]


def synthesize_policy(ctrl: ControlSpec, field, **kw) -> FeedbackPolicy:
    """Feedback policy from a value field (see :class:`FeedbackPolicy`)."""
    if field.ok.sum() < 2:
        raise ValueError("value field has fewer than two valid points")
    return FeedbackPolicy(ctrl, field, **kw)


# ----------------------------------------------------------------------------
# Costs along controlled paths
# ----------------------------------------------------------------------------


def _left_weights(lam, grid):
    """Exact weights of ``int e^{-lam t} c_i dt`` for a piecewise-constant ``c``."""
    t = grid.nodes[:-1]
    return np.exp(-lam * t) * (-math.expm1(-lam * grid.dt)) / lam


def _interval_weights(lam, grid):
    """Left/right weights integrating ``e^{-lam t}`` against the linear interpolant on each step.

    The control is held on ``[t_i, t_{i+1})``, so the running cost on that
    step interpolates ``g(X_i, u_i)`` and ``g(X_{i+1}, u_i)``.
    """
    h = grid.dt
    e = np.exp(-lam * grid.nodes[:-1])
    m = -math.expm1(-lam * h) / (lam * lam * h)
    return e * (1.0 / lam - m), e * (m - math.exp(-lam * h) / lam)


def _controlled(ctrl, source, T, steps_per_unit, n_paths, seed, x0, threads):
    grid = TimeGrid.with_density(T, steps_per_unit)
    ens = simulate_controlled(ctrl, source, grid, n_paths, seed, x0, threads=threads)
    if ens.flagged:
        raise PolicyError(f"controlled state blew up on {int(ens.aborted.sum())} paths: "
                          "control not admissible")
    return ens


@dataclass
class CostEstimate:
    """``J`` truncated at ``T`` with its standard error and the tail allowance."""

    J: float
    ci: float
    horizon: float
    tail_bound: float
    admissibility: float
    admissibility_ci: float

    @property
    def upper(self) -> float:
        return self.J + self.tail_bound


def _path_costs(ctrl, ens):
    lam = ctrl.lam
    grid = ens.grid
    w = _left_weights(lam, grid)
    wl, wr = _interval_weights(lam, grid)
    N = grid.n_steps
    X, U = ens.X, ens.controls
    P = X.shape[0]
    cost = np.zeros(P)
    u2 = np.zeros(P)
    g_mean = np.zeros(N)
    u2_mean = np.zeros(N)
    for i in range(N):
        gi = ctrl.g(X[:, i], U[:, i])
        ui = np.sum(U[:, i] ** 2, axis=1)
        cost += wl[i] * gi + wr[i] * ctrl.g(X[:, i + 1], U[:, i])
        u2 += w[i] * ui
        g_mean[i] = gi.mean()
        u2_mean[i] = ui.mean()
    return cost, u2, g_mean, u2_mean


def cost_estimate(ctrl: ControlSpec, x0, source, T: float, n_paths: int = 20_000, seed: int = 0,
                  steps_per_unit: float = 32.0, threads: int = 1) -> CostEstimate:
    """Monte Carlo estimate of ``E int_0^T e^{-lam t} g(X_t, u_t) dt``.

    Trapezoid sums with exact exponential weights on each step, the
    control held at its left-end value.  The tail beyond ``T``
    is bounded by ``max(C_g (1 + sup_t E|u_t|^2), sup_t E g_t) e^{-lam T} / lam``
    using the sampled moments.  ``admissibility`` is the estimate of
    ``E int_0^T e^{-lam t} |u_t|^2 dt``.
    """
    ens = _controlled(ctrl, source, T, steps_per_unit, n_paths, seed, x0, threads)
    cost, u2, g_mean, u2_mean = _path_costs(ctrl, ens)
    P = cost.size
    lam = ctrl.lam
    tail = max(ctrl.C_g * (1.0 + float(u2_mean.max())), float(g_mean.max())) * math.exp(-lam * T) / lam
    se = lambda a: float(a.std(ddof=1) / math.sqrt(P)) if P > 1 else 0.0
    return CostEstimate(float(cost.mean()), se(cost), float(T), tail, float(u2.mean()), se(u2))


@dataclass
class FundamentalRelation:
    """Terms of ``J_T + e^{-lam T} E v(X_T) = v(x) + E int_0^T e^{-lam t} I_t dt``.

    ``I = g(X, u) + g(X) . r(X, u) - inf_w {g(X, w) + g(X) . r(X, w)}`` is the
    nonnegative gap; ``residual`` is the per-path difference of both sides.
    """

    J: float
    J_ci: float
    v: float
    terminal: float
    correction_integral: float
    correction_ci: float
    residual: float
    residual_ci: float
    min_integrand: float
    tail_bound: float
    interp_tol: float


def fundamental_relation_check(ctrl: ControlSpec, x0, source, field, T: float,
                               n_paths: int = 20_000, seed: int = 0,
                               steps_per_unit: float = 32.0, threads: int = 1) -> FundamentalRelation:
    """Estimate both sides of the finite-horizon fundamental relation along controlled paths.

    Time integrals use exponentially weighted trapezoid sums on each step
    with the control held at its left-end value.
    """
    ens = _controlled(ctrl, source, T, steps_per_unit, n_paths, seed, x0, threads)
    lam = ctrl.lam
    grid = ens.grid
    wl, wr = _interval_weights(lam, grid)
    X, U = ens.X, ens.controls
    P = X.shape[0]
    cost = np.zeros(P)
    corr = np.zeros(P)
    u2_max = g_max = 0.0
    min_int = np.inf
    # the Hamiltonian minimum depends only on the node, not on the held control
    gs = [field.grad_sigma(X[:, i]) for i in range(grid.n_steps + 1)]
    hs = [hamiltonian_argmin(X[:, i], field.value(X[:, i]), gs[i], ctrl).h_value
          for i in range(grid.n_steps + 1)]
    for i in range(grid.n_steps):
        u = U[:, i]
        ends = []
        for j in (i, i + 1):
            x = X[:, j]
            run = ctrl.g(x, u)
            integrand = run + np.einsum("nk,nk->n", gs[j], ctrl.r(x, u)) - hs[j]
            min_int = min(min_int, float(integrand.min()))
            ends.append((run, integrand))
        (r0, i0), (r1, i1) = ends
        cost += wl[i] * r0 + wr[i] * r1
        corr += wl[i] * i0 + wr[i] * i1
        u2_max = max(u2_max, float(np.mean(np.sum(u ** 2, axis=1))))
        g_max = max(g_max, float(r0.mean()))
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    v0 = float(field.value(x0[None])[0])
    eT = math.exp(-lam * T)
    term = eT * field.value(X[:, -1])
    per_path = cost + term - corr - v0
    se = lambda a: float(a.std(ddof=1) / math.sqrt(P))
    tail = max(ctrl.C_g * (1.0 + u2_max), g_max) * eT / lam
    dv = field.delta_v if np.isfinite(field.delta_v) else 0.0
    return FundamentalRelation(
        J=float(cost.mean()), J_ci=se(cost), v=v0, terminal=float(term.mean()),
        correction_integral=float(corr.mean()), correction_ci=se(corr),
        residual=float(per_path.mean()), residual_ci=se(per_path),
        min_integrand=min_int, tail_bound=tail, interp_tol=dv * (1 + eT))


@dataclass
class ClosedLoop:
    """Closed-loop statistics and the admissibility estimate ``E int_0^T e^{-lam t}|u|^2 dt``."""

    admissibility: float
    ci: float
    tail_bound: float
    horizon: float
    mean_path: np.ndarray
    std_path: np.ndarray
    max_abs_state: float
    max_abs_control: float

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.admissibility) and np.isfinite(self.ci))


def closed_loop_run(ctrl: ControlSpec, policy, x0, T: float, n_paths: int = 20_000, seed: int = 0,
                    steps_per_unit: float = 32.0, threads: int = 1) -> ClosedLoop:
    """Simulate the closed-loop equation under ``policy`` and summarise it.

    The tail allowance is ``(C_gamma (1 + G))^2 e^{-lam T} / lam`` with ``G``
    the largest ``|grad v sigma|`` on the policy's value field, which bounds
    the squared feedback at every state the field covers.
    """
    ens = _controlled(ctrl, policy, T, steps_per_unit, n_paths, seed, x0, threads)
    lam = ctrl.lam
    w = _left_weights(lam, ens.grid)
    u2 = np.sum(ens.controls ** 2, axis=2) @ w
    P = u2.size
    field = getattr(policy, "field", None)
    G = float(np.max(np.linalg.norm(field.g[field.ok], axis=1))) if field is not None else 0.0
    tail = (ctrl.C_gamma * (1.0 + G)) ** 2 * math.exp(-lam * T) / lam
    return ClosedLoop(
        admissibility=float(u2.mean()), ci=float(u2.std(ddof=1) / math.sqrt(P)), tail_bound=tail,
        horizon=float(T), mean_path=ens.X.mean(axis=0), std_path=ens.X.std(axis=0),
        max_abs_state=float(np.max(np.abs(ens.X))), max_abs_control=float(np.max(np.abs(ens.controls))))
