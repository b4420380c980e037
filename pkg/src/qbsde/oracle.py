"""Independent ground-truth generators for one-dimensional problems.

Nothing here touches the regression solver: the tree uses Gauss-Hermite
transition weights, the quadrature value uses closed-form Gaussian
marginals, and the HJB solver is a finite-difference Newton method.
All outputs are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import CubicSpline
from scipy.integrate import solve_bvp
from scipy.linalg import solve_banded

__all__ = [
    "TreeModel",
    "TreeResult",
    "tree_solve",
    "quadrature_value_1d",
    "DenseValue",
    "NewtonDivergence",
    "fd_hjb_1d",
    "exit_value_1d",
]

MAX_TREE_NODES = 2_000_000


def _scalar_forward(spec):
    if spec.state_dim != 1 or spec.noise_dim != 1:
        raise ValueError("oracle requires d = k = 1")
    return float(spec.drift_matrix[0, 0]), float(spec.diffusion[0, 0])


@dataclass(frozen=True)
class TreeModel:
    """Probabilists' Gauss-Hermite nodes ``xi`` and weights (summing to one)."""

    depth: int
    order: int
    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def build(cls, depth, order):
        if not 1 <= order <= 7:
            raise ValueError("quadrature order must lie in [1, 7]")
        xi, w = hermegauss(order)
        w = w / w.sum()
        return cls(int(depth), int(order), xi, w)


@dataclass
class TreeResult:
    y0: float
    z0: float
    values: List[np.ndarray]
    method: str


def _implicit_step(spec, x, cond, z, dt, tol=1e-13, max_iter=200):
    y = cond.copy()
    for _ in range(max_iter):
        y_new = cond + dt * spec.generator(x, y, z)
        if np.max(np.abs(y_new - y)) <= tol * (1 + np.max(np.abs(y_new))):
            return y_new
        y = y_new
    raise RuntimeError("implicit step did not converge in the oracle")


def _terminal_on(terminal, x):
    if terminal is None:
        return np.zeros(x.shape[0])
    if callable(terminal):
        return np.asarray(terminal(x[:, None]), dtype=float)
    return np.full(x.shape[0], float(terminal))


def tree_solve(spec, T: float, n_tree: int, q: int = 5, x0=0.0, terminal=None,
               method: str = "auto", lattice_points: int = 801) -> TreeResult:
    """Backward induction on a Gauss-Hermite quadrature tree.

    Each step maps ``x`` to ``e^{a dt}(x + dt b(x) + sigma sqrt(dt) xi_j)`` with
    weight ``w_j`` and applies the same implicit-in-``y`` step as the
    regression solver, with ``Z = sum_j w_j Y_j xi_j / sqrt(dt)``.

    ``method="tree"`` expands the full non-recombining tree (depth at most
    12 and ``q^depth`` within the node budget); ``method="lattice"`` is the
    recombining variant that carries each level on a fixed spatial grid with
    cubic-spline interpolation, which is what makes deep grids affordable.
    ``"auto"`` picks the tree when it fits.
    """
    a, sigma = _scalar_forward(spec)
    model = TreeModel.build(n_tree, q)
    total = sum(q ** i for i in range(n_tree + 1))
    if method == "auto":
        method = "tree" if (n_tree <= 12 and total <= MAX_TREE_NODES) else "lattice"
    if method == "tree":
        if n_tree > 12 or total > MAX_TREE_NODES:
            raise MemoryError(f"tree with depth {n_tree} and order {q} exceeds the node budget")
        return _tree(spec, a, sigma, T, model, float(x0), terminal)
    if method == "lattice":
        return _lattice(spec, a, sigma, T, model, float(x0), terminal, lattice_points)
    raise ValueError(f"unknown method {method!r}")


def _child_states(spec, a, sigma, x, dt, xi):
    mean = np.exp(a * dt) * (x + dt * spec.drift_fn(x[:, None])[:, 0])
    return mean[:, None] + np.exp(a * dt) * sigma * np.sqrt(dt) * xi[None, :]


def _tree(spec, a, sigma, T, model, x0, terminal):
    N, xi, w = model.depth, model.nodes, model.weights
    dt = T / N
    levels = [np.array([x0])]
    for _ in range(N):
        levels.append(_child_states(spec, a, sigma, levels[-1], dt, xi).ravel())
    Y = _terminal_on(terminal, levels[-1])
    values = [Y]
    z = np.zeros(1)
    for i in range(N - 1, -1, -1):
        x = levels[i]
        Yc = Y.reshape(x.size, xi.size)
        cond = Yc @ w
        z = (Yc * (w * xi)[None]) .sum(axis=1) / np.sqrt(dt)
        Y = _implicit_step(spec, x[:, None], cond, z[:, None], dt)
        values.append(Y)
    values.reverse()
    return TreeResult(float(Y[0]), float(z[0]), values, "tree")


def _lattice(spec, a, sigma, T, model, x0, terminal, M):
    N, xi, w = model.depth, model.nodes, model.weights
    dt = T / N
    if a < 0:
        spread = sigma * np.sqrt(min(T, 1.0 / (2 * abs(a))))
    else:
        spread = sigma * np.sqrt(T) * np.exp(a * T)
    half = 10.0 * spread + 1.0
    grid = np.linspace(min(x0, 0.0) - half, max(x0, 0.0) + half, M)
    Y = _terminal_on(terminal, grid)
    values = [Y]
    for i in range(N - 1, 0, -1):
        Y = _lattice_step(spec, a, sigma, grid, Y, grid, dt, xi, w)[0]
        values.append(Y)
    y0, z0 = _lattice_step(spec, a, sigma, grid, Y, np.array([x0]), dt, xi, w)
    values.append(y0)
    values.reverse()
    return TreeResult(float(y0[0]), float(z0[0]), values, "lattice")


def _lattice_step(spec, a, sigma, grid, Ynext, x, dt, xi, w):
    spline = CubicSpline(grid, Ynext, bc_type="natural")
    children = np.clip(_child_states(spec, a, sigma, x, dt, xi), grid[0], grid[-1])
    Yc = spline(children)
    cond = Yc @ w
    z = (Yc * (w * xi)[None]).sum(axis=1) / np.sqrt(dt)
    y = _implicit_step(spec, x[:, None], cond, z[:, None], dt)
    return y, z


# ----------------------------------------------------------------------------
# Gaussian-marginal quadrature for z-free generators
# ----------------------------------------------------------------------------


def _check_z_free(spec, lam, rng_seed=12345):
    rng = np.random.default_rng(rng_seed)
    x = rng.uniform(-5, 5, (256, 1))
    y = rng.uniform(-5, 5, 256)
    z = rng.uniform(-5, 5, (256, 1))
    f = spec.generator
    base = f(x, np.zeros(256), np.zeros((256, 1)))
    lin = f(x, y, z) - base + lam * y
    if np.max(np.abs(lin)) > 1e-9 * (1 + np.max(np.abs(y))):
        raise ValueError("generator is not of the form -lambda y + f(x)")
    if np.max(np.abs(spec.drift_fn(x))) > 0:
        raise ValueError("quadrature oracle requires b = 0 (Ornstein-Uhlenbeck forward)")


def _gauss_moments(a, sigma, x, s):
    m = np.exp(a * s) * x
    if abs(a) < 1e-14:
        v = sigma ** 2 * s
    else:
        v = sigma ** 2 * np.expm1(2 * a * s) / (2 * a)
    return m, v


def _quad_value(f, lam, a, sigma, x, T, panels, gl_order, gh_order):
    tg, wg = leggauss(gl_order)
    edges = np.linspace(0.0, T, panels + 1)
    h = np.diff(edges)
    s = (edges[:-1, None] + 0.5 * h[:, None] * (tg[None] + 1)).ravel()
    ws = (0.5 * h[:, None] * wg[None]).ravel()
    xi, wh = hermegauss(gh_order)
    wh = wh / wh.sum()
    m, v = _gauss_moments(a, sigma, x, s)
    pts = m[:, None] + np.sqrt(v)[:, None] * xi[None]
    Ef = (f(pts.reshape(-1, 1)).reshape(pts.shape) * wh[None]).sum(axis=1)
    return float(np.sum(ws * np.exp(-lam * s) * Ef))


def quadrature_value_1d(spec, x: float, horizon: float, tol: float = 1e-6,
                        max_refinements: int = 12) -> float:
    """``int_0^T e^{-lambda s} E[f(X_s^x)] ds`` for ``F = -lambda y + f(x)`` and an OU state.

    Composite Gauss-Legendre in time and Gauss-Hermite in space are refined
    together until two successive values agree to ``tol``.
    """
    a, sigma = _scalar_forward(spec)
    lam = spec.constants.lam
    _check_z_free(spec, lam)
    n1 = 1

    def f(pts):
        return spec.generator(pts, np.zeros(pts.shape[0]), np.zeros((pts.shape[0], n1)))

    panels, gh = 4, 16
    prev = _quad_value(f, lam, a, sigma, float(x), horizon, panels, 8, gh)
    for _ in range(max_refinements):
        panels, gh = panels * 2, gh * 2
        cur = _quad_value(f, lam, a, sigma, float(x), horizon, panels, 8, min(gh, 180))
        if abs(cur - prev) < tol:
            return cur
        prev = cur
    raise RuntimeError("quadrature did not reach the requested tolerance")


# ----------------------------------------------------------------------------
# Finite-difference Newton solver for the stationary HJB equation
# ----------------------------------------------------------------------------


class NewtonDivergence(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


@dataclass
class DenseValue:
    x: np.ndarray
    v: np.ndarray
    meshes: List[int] = field(default_factory=list)
    residual_history: List[float] = field(default_factory=list)

    def __call__(self, x):
        return np.interp(x, self.x, self.v)


def _fd_newton(spec, a, sigma, grid, v0, tol=1e-11, max_iter=60):
    n = grid.size
    h = grid[1] - grid[0]
    drift = a * grid + spec.drift_fn(grid[:, None])[:, 0]
    X = grid[:, None]

    def deriv(v):
        d1 = np.empty(n)
        d2 = np.empty(n)
        d1[1:-1] = (v[2:] - v[:-2]) / (2 * h)
        d2[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h ** 2
        d1[0] = d1[-1] = 0.0
        d2[0] = 2 * (v[1] - v[0]) / h ** 2
        d2[-1] = 2 * (v[-2] - v[-1]) / h ** 2
        return d1, d2

    def residual(v):
        d1, d2 = deriv(v)
        z = (sigma * d1)[:, None]
        return 0.5 * sigma ** 2 * d2 + drift * d1 + spec.generator(X, v, z), d1

    v = v0.copy()
    R, d1 = residual(v)
    history = [float(np.max(np.abs(R)))]
    for _ in range(max_iter):
        if history[-1] < tol:
            return v, history
        z = (sigma * d1)[:, None]
        fy = spec.generator_dy(X, v, z)
        fz = spec.generator_dz(X, v, z)[:, 0] * sigma
        c1 = drift + fz
        # banded Jacobian: rows (upper, main, lower)
        ab = np.zeros((3, n))
        main = -sigma ** 2 / h ** 2 + fy
        up = 0.5 * sigma ** 2 / h ** 2 + c1 / (2 * h)
        lo = 0.5 * sigma ** 2 / h ** 2 - c1 / (2 * h)
        ab[1] = main
        ab[0, 2:] = up[1:-1]
        ab[2, :-2] = lo[1:-1]
        ab[0, 1] = sigma ** 2 / h ** 2
        ab[2, -2] = sigma ** 2 / h ** 2
        step = solve_banded((1, 1), ab, -R)
        t = 1.0
        while True:
            cand = v + t * step
            Rc, d1c = residual(cand)
            if np.max(np.abs(Rc)) < (1 - 1e-4 * t) * history[-1] or t < 1e-6:
                break
            t *= 0.5
        if t < 1e-6:
            raise NewtonDivergence("damped Newton failed to decrease the residual", history)
        v, R, d1 = cand, Rc, d1c
        history.append(float(np.max(np.abs(R))))
    if history[-1] < tol:
        return v, history
    raise NewtonDivergence("Newton did not converge", history)


def fd_hjb_1d(spec, domain=None, mesh: int = 201, tol: float = 1e-5,
              max_refinements: int = 6, min_std: float = 5.0) -> DenseValue:
    """Solve ``sigma^2/2 v'' + (a x + b(x)) v' + F(x, v, sigma v') = 0`` on an interval.

    Central differences with homogeneous Neumann ends; damped Newton per mesh;
    the mesh is halved until two successive solutions agree to ``tol`` in sup
    norm on the inner half of the interval.  For an OU state the ends must sit
    at least ``min_std`` stationary standard deviations from the origin.
    """
    a, sigma = _scalar_forward(spec)
    std = sigma / np.sqrt(2 * abs(a)) if a < 0 else None
    if domain is None:
        if std is None:
            raise ValueError("an explicit domain is required for non-mean-reverting states")
        domain = (-7.0 * std, 7.0 * std)
    lo, hi = map(float, domain)
    if std is not None and min(-lo, hi) < min_std * std - 1e-12:
        raise ValueError(f"boundaries must lie at least {min_std} stationary deviations out")
    n = int(mesh)
    grid = np.linspace(lo, hi, n)
    v, hist = _fd_newton(spec, a, sigma, grid, np.zeros(n))
    meshes = [n]
    inner = lambda g: np.abs(g) <= 0.5 * max(-lo, hi) if lo < 0 < hi else slice(None)
    for _ in range(max_refinements):
        n2 = 2 * n - 1
        grid2 = np.linspace(lo, hi, n2)
        v2, hist = _fd_newton(spec, a, sigma, grid2, np.interp(grid2, grid, v))
        meshes.append(n2)
        gap = np.max(np.abs(v2[::2] - v)[inner(grid)])
        grid, v, n = grid2, v2, n2
        if gap < tol:
            return DenseValue(grid, v, meshes, hist)
    raise NewtonDivergence(f"mesh refinement did not reach tolerance {tol}", hist)


def exit_value_1d(spec, x, tol: float = 1e-9) -> float:
    """Value at ``x`` of the exit problem on an interval for ``F = -lambda y + f(x)``.

    Solves the two-point problem ``sigma^2/2 u'' + (a x + b(x)) u' - lambda u
    + f(x) = 0`` with ``u = xi`` at both ends (no horizon truncation), e.g.
    the Laplace transform ``E[e^{-lambda tau}]`` when ``f = 0`` and ``xi = 1``.
    """
    a, sigma = _scalar_forward(spec)
    lam = spec.constants.lam
    if spec.stopping is None or not hasattr(spec.stopping, "lower"):
        raise ValueError("exit_value_1d needs an interval exit domain")
    _check_z_free(spec, lam)
    lo, hi = float(spec.stopping.lower[0]), float(spec.stopping.upper[0])
    ends = spec.terminal_fn(np.array([[lo], [hi]]))
    zero = lambda t: np.zeros(t.shape[0])

    def f(t):
        X = t[:, None]
        return spec.generator(X, zero(t), np.zeros((t.size, 1)))

    def rhs(t, u):
        drift = a * t + spec.drift_fn(t[:, None])[:, 0]
        return np.vstack([u[1], 2.0 * (lam * u[0] - drift * u[1] - f(t)) / sigma ** 2])

    def bc(ua, ub):
        return np.array([ua[0] - ends[0], ub[0] - ends[1]])

    mesh = np.linspace(lo, hi, 201)
    res = solve_bvp(rhs, bc, mesh, np.vstack([np.interp(mesh, [lo, hi], ends), np.zeros_like(mesh)]),
                    tol=tol, max_nodes=200_000)
    if not res.success:
        raise RuntimeError(f"boundary-value solve failed: {res.message}")
    return float(res.sol(float(x))[0])
