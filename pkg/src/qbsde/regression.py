"""Least-squares regression for conditional expectations.

Bases are evaluated on standardised coordinates (per-fit mean and scale),
coordinates with no spread are dropped, and the ridge problem

    min |Phi beta - y|^2 + ridge * n * |beta|^2

is solved through a QR factorisation of the stacked matrix
``[Phi; sqrt(ridge n) I]``.  Normal equations are never formed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

__all__ = ["RegressionConfig", "RankDeficiencyError", "LinearFit", "fit"]


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RegressionConfig:
    """Basis family and solver controls shared by all backward recursions.

    ``basis`` is ``"poly"`` (total degree ``degree``) or ``"rbf"`` (Gaussian
    bumps at ``centers`` with length scale ``width`` plus a constant, both in
    standardised coordinates).  ``z_max=None`` selects ``10 (1 + y_bound)``.
    """

    basis: str = "poly"
    degree: int = 4
    centers: Optional[tuple] = None
    width: float = 1.0
    ridge: float = 1e-10
    picard_max: int = 50
    picard_tol: float = 1e-12
    z_max: Optional[float] = None

    def __post_init__(self):
        if self.basis not in ("poly", "rbf"):
            raise ValueError(f"unknown basis {self.basis!r}")
        if self.degree < 0 or self.ridge < 0 or self.picard_max < 1:
            raise ValueError("degree >= 0, ridge >= 0 and picard_max >= 1 required")
        if self.z_max is not None and not self.z_max > 0:
            raise ValueError("z_max must be positive")
        if self.basis == "rbf" and not self.width > 0:
            raise ValueError("rbf width must be positive")

    def to_dict(self):
        return {"basis": self.basis, "degree": self.degree,
                "centers": None if self.centers is None else np.asarray(self.centers).tolist(),
                "width": self.width, "ridge": self.ridge, "picard_max": self.picard_max,
                "picard_tol": self.picard_tol, "z_max": self.z_max}


def _exponents(dim, degree):
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(dim), total):
            e = [0] * dim
            for j in combo:
                e[j] += 1
            out.append(tuple(e))
    return np.array(out, dtype=int).reshape(len(out), dim)


def _rbf_centers(cfg, dim):
    if cfg.centers is not None:
        c = np.asarray(cfg.centers, dtype=float)
        return c.reshape(-1, dim)
    # default: a regular grid on [-2, 2] per active coordinate
    m = max(2, cfg.degree + 1)
    ax = np.linspace(-2.0, 2.0, m)
    return np.array(list(itertools.product(ax, repeat=dim)))


class LinearFit:
    """A fitted regression ``x -> Phi(x) beta`` with its own standardisation."""

    def __init__(self, cfg: RegressionConfig, mean, scale, active, coef, exps=None, centers=None,
                 factors=None):
        self.cfg = cfg
        self._factors = factors
        self.mean = mean
        self.scale = scale
        self.active = active
        self.coef = coef
        self.exps = exps
        self.centers = centers

    def design(self, x):
        return _design(self.cfg, (x[:, self.active] - self.mean) / self.scale,
                       self.exps, self.centers)

    def predict(self, x):
        x = np.atleast_2d(x)
        return self.design(x) @ self.coef

    def project(self, targets):
        """Fitted values of new ``targets`` on the training design (reuses the QR factors)."""
        Q, R, Phi = self._factors
        t = np.asarray(targets, dtype=float)
        squeeze = t.ndim == 1
        t2 = t[:, None] if squeeze else t
        n = t2.shape[0]
        coef = solve_triangular(R, Q[:n].T @ t2)
        out = Phi @ coef
        return out[:, 0] if squeeze else out

    def gradient(self, x):
        """Gradient of each fitted output w.r.t. ``x``: shape ``(n, r, d)``."""
        x = np.atleast_2d(x)
        n, d = x.shape
        u = (x[:, self.active] - self.mean) / self.scale
        out = np.zeros((n, self.coef.shape[1], d))
        if self.cfg.basis == "poly":
            for j_local, j in enumerate(np.flatnonzero(self.active)):
                e = self.exps
                mask = e[:, j_local] > 0
                if not mask.any():
                    continue
                ed = e[mask].copy()
                powers = ed[:, j_local].astype(float)
                ed[:, j_local] -= 1
                phi = _monomials(u, ed) * powers
                out[:, :, j] = phi @ self.coef[np.flatnonzero(mask)] / self.scale[j_local]
        else:
            c = self.centers
            w = self.cfg.width
            diff = u[:, None, :] - c[None]
            phi = np.exp(-0.5 * np.sum(diff ** 2, axis=2) / w ** 2)
            for j_local, j in enumerate(np.flatnonzero(self.active)):
                dphi = -phi * diff[:, :, j_local] / w ** 2
                out[:, :, j] = dphi @ self.coef[1:] / self.scale[j_local]
        return out


def _monomials(u, exps):
    n, da = u.shape
    q = int(exps.max()) if exps.size else 0
    pw = np.empty((q + 1, n, da))
    pw[0] = 1.0
    for p in range(1, q + 1):
        pw[p] = pw[p - 1] * u
    out = np.empty((n, exps.shape[0]))
    for m, e in enumerate(exps):
        col = pw[e[0], :, 0].copy()
        for j in range(1, da):
            if e[j]:
                col *= pw[e[j], :, j]
        out[:, m] = col
    return out


def _design(cfg, u, exps, centers):
    n = u.shape[0]
    if cfg.basis == "poly":
        if u.shape[1] == 0:
            return np.ones((n, 1))
        return _monomials(u, exps)
    if u.shape[1] == 0:
        return np.ones((n, 1))
    diff = u[:, None, :] - centers[None]
    phi = np.exp(-0.5 * np.sum(diff ** 2, axis=2) / cfg.width ** 2)
    return np.hstack([np.ones((n, 1)), phi])


def fit(x, targets, cfg: RegressionConfig):
    """Fit ``targets`` (``(n,)`` or ``(n, r)``) on the basis of ``x`` ``(n, d)``.

    Returns ``(LinearFit, fitted_values)`` with fitted values shaped like
    ``targets``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.asarray(targets, dtype=float)
    squeeze = t.ndim == 1
    if squeeze:
        t = t[:, None]
    n, d = x.shape
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    active = scale > 1e-12 * (1.0 + np.abs(mean))
    mean, scale = mean[active], scale[active]
    u = (x[:, active] - mean) / scale
    da = int(active.sum())
    exps = _exponents(da, cfg.degree) if cfg.basis == "poly" else None
    centers = _rbf_centers(cfg, da) if (cfg.basis == "rbf" and da > 0) else None
    Phi = _design(cfg, u, exps, centers)
    Q, R = _factor(Phi, cfg.ridge)
    coef = solve_triangular(R, Q[:n].T @ t)
    model = LinearFit(cfg, mean, scale, active, coef, exps, centers, factors=(Q, R, Phi))
    fitted = Phi @ coef
    return model, (fitted[:, 0] if squeeze else fitted)


def _factor(Phi, ridge):
    n, m = Phi.shape
    A = np.vstack([Phi, np.sqrt(ridge * n) * np.eye(m)]) if ridge > 0 else Phi
    if A.shape[0] < m:
        raise RankDeficiencyError("fewer samples than basis functions; increase ridge")
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-13 * max(diag.max(), 1e-300):
        raise RankDeficiencyError("regression matrix is rank deficient; increase the ridge weight")
    return Q, R
