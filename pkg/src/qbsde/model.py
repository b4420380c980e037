"""Problem instances and sampled audits of the standing assumptions.

A :class:`ProblemSpec` bundles a forward SDE

    dX = (A X + b(X)) dt + sigma dW,

a generator ``F(x, y, z)`` with its partial derivatives, optional terminal
data and exit domain, and the structural constants ``(C, alpha, lambda, K,
M)``.  All maps are vectorised over a leading batch axis:

* ``x``: ``(n, d)``, ``y``: ``(n,)``, ``z``: ``(n, k)``
* ``F`` and ``dF/dy`` return ``(n,)``; ``dF/dx`` returns ``(n, d)``;
  ``dF/dz`` returns ``(n, k)``
* ``b`` returns ``(n, d)`` and its Jacobian ``(n, d, d)``
* ``terminal_fn`` returns ``(n,)``
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

__all__ = [
    "Constants",
    "BoundSet",
    "Box",
    "Ball",
    "WholeSpace",
    "ProblemSpec",
    "SampleCloud",
    "AssumptionCheck",
    "AssumptionReport",
    "validate_assumptions",
    "theoretical_bounds",
    "monotonicity_margin",
]

ArrayFn = Callable[..., np.ndarray]


@dataclass(frozen=True)
class Constants:
    """Structural constants of the generator and terminal data.

    ``lam`` is the monotonicity rate (``lambda`` is reserved in Python).
    """

    C: float
    alpha: float
    lam: float
    K: float
    M: float = 0.0

    def check(self) -> None:
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if self.C < 0 or self.K < 0 or self.M < 0:
            raise ValueError("C, K and M must be nonnegative")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")

    def to_dict(self) -> dict:
        return {"C": self.C, "alpha": self.alpha, "lambda": self.lam,
                "K": self.K, "M": self.M}


@dataclass(frozen=True)
class BoundSet:
    y_bound: float
    beta: float
    gradient_bound: float


# ----------------------------------------------------------------------------
# Domains. ``contains`` tests the open set (used for exit times); ``project``
# maps onto the closure (used for control constraints).
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("Box needs lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return np.all((x > self.lower) & (x < self.upper), axis=-1)

    def project(self, x):
        return np.clip(x, self.lower, self.upper)

    def face_distances(self, x, cov):
        """Distances to each face (positive inside) and the noise variance normal to it."""
        x = np.asarray(x, dtype=float)
        dist = np.concatenate([x - self.lower, self.upper - x], axis=-1)
        var = np.tile(np.diag(cov), 2)
        return dist, np.broadcast_to(var, dist.shape)

    def sample(self, rng, n):
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def to_dict(self):
        return {"type": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True, eq=False)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        if not self.radius > 0:
            raise ValueError("Ball radius must be positive")

    @property
    def dim(self) -> int:
        return self.center.size

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - self.center, axis=-1) < self.radius

    def project(self, x):
        d = x - self.center
        nrm = np.linalg.norm(d, axis=-1, keepdims=True)
        scale = np.minimum(1.0, self.radius / np.maximum(nrm, 1e-300))
        return self.center + d * scale

    def face_distances(self, x, cov):
        """Distance to the sphere (positive inside) and the radial noise variance."""
        d = np.asarray(x, dtype=float) - self.center
        nrm = np.linalg.norm(d, axis=-1)
        n = d / np.maximum(nrm, 1e-300)[:, None]
        var = np.einsum("ni,ij,nj->n", n, cov, n)
        return (self.radius - nrm)[:, None], var[:, None]

    def sample(self, rng, n):
        v = rng.standard_normal((n, self.dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        r = self.radius * rng.uniform(size=(n, 1)) ** (1.0 / self.dim)
        return self.center + r * v

    def to_dict(self):
        return {"type": "ball", "center": self.center.tolist(), "radius": float(self.radius)}


class WholeSpace:
    """The full space: never exited, projection is the identity."""

    def contains(self, x):
        x = np.asarray(x)
        return np.ones(x.shape[:-1], dtype=bool)

    def project(self, x):
        return x

    def to_dict(self):
        return {"type": "whole"}

    def __repr__(self):
        return "WholeSpace()"


def _zero_drift(x):
    return np.zeros_like(x)


def _zero_jac(x):
    n, d = x.shape
    return np.zeros((n, d, d))


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Finite-dimensional forward SDE plus monotone quadratic generator.

    ``stopping`` is ``None`` for an infinite horizon or a :class:`Box` /
    :class:`Ball` whose first exit time plays the role of the random horizon.
    """

    drift_matrix: np.ndarray
    diffusion: np.ndarray
    generator: ArrayFn
    generator_dx: ArrayFn
    generator_dy: ArrayFn
    generator_dz: ArrayFn
    constants: Constants
    drift_fn: Optional[ArrayFn] = None
    drift_jac: Optional[ArrayFn] = None
    terminal_fn: Optional[ArrayFn] = None
    stopping: Optional[object] = None
    name: str = "problem"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.drift_matrix, dtype=float))
        S = np.atleast_2d(np.asarray(self.diffusion, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError("drift_matrix must be square")
        if S.shape[0] != A.shape[0]:
            raise ValueError("diffusion must have shape (d, k)")
        object.__setattr__(self, "drift_matrix", A)
        object.__setattr__(self, "diffusion", S)
        if self.drift_fn is None:
            object.__setattr__(self, "drift_fn", _zero_drift)
            object.__setattr__(self, "drift_jac", _zero_jac)
        elif self.drift_jac is None:
            raise ValueError("drift_fn given without drift_jac")
        if isinstance(self.stopping, WholeSpace):
            object.__setattr__(self, "stopping", None)
        if self.stopping is not None and self.terminal_fn is None:
            raise ValueError("an exit domain requires terminal_fn")

    @property
    def state_dim(self) -> int:
        return self.drift_matrix.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.diffusion.shape[1]

    @property
    def has_exit(self) -> bool:
        return self.stopping is not None

    def with_constants(self, **changes) -> "ProblemSpec":
        return dataclasses.replace(self, constants=dataclasses.replace(self.constants, **changes))


def theoretical_bounds(spec) -> BoundSet:
    """Closed-form a priori constants.

    ``y_bound = M + K/lambda`` bounds the solution, ``beta = M + C(1+M)/lambda``
    is the truncation constant and ``C/lambda`` bounds the gradient per unit
    direction.  Accepts a :class:`ProblemSpec` or bare :class:`Constants`.
    """
    c = spec.constants if hasattr(spec, "constants") else spec
    c.check()
    return BoundSet(
        y_bound=c.M + c.K / c.lam,
        beta=c.M + c.C * (1.0 + c.M) / c.lam,
        gradient_bound=c.C / c.lam,
    )


# ----------------------------------------------------------------------------
# Sampled assumption audit
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleCloud:
    """Uniform sampling boxes for the assumption audit.

    States come from ``[-x_half, x_half]^d``, the scalar ``y, y'`` from
    ``[-y_half, y_half]`` and ``z`` from ``[-z_half, z_half]^k``.  Directions
    for the dissipativity test are uniform on the unit sphere.
    """

    x_half: float = 5.0
    y_half: float = 5.0
    z_half: float = 5.0


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    sample_count: int
    worst_violation: float
    passed: bool


@dataclass(frozen=True)
class AssumptionReport:
    checks: Tuple[AssumptionCheck, ...]
    tolerance: float
    unaudited: Tuple[str, ...] = ("joint continuity of the derivatives of F",)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_rows(self):
        return [dataclasses.asdict(c) for c in self.checks]


def _draw(spec, sample_count, seed, cloud):
    rng = np.random.default_rng(seed)
    d, k = spec.state_dim, spec.noise_dim
    x = rng.uniform(-cloud.x_half, cloud.x_half, size=(sample_count, d))
    y = rng.uniform(-cloud.y_half, cloud.y_half, size=sample_count)
    y2 = rng.uniform(-cloud.y_half, cloud.y_half, size=sample_count)
    z = rng.uniform(-cloud.z_half, cloud.z_half, size=(sample_count, k))
    v = rng.standard_normal((sample_count, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return rng, x, y, y2, z, v


def validate_assumptions(spec: ProblemSpec, sample_count: int = 10_000, seed: int = 0,
                         tol: float = 1e-12, cloud: SampleCloud = SampleCloud()) -> AssumptionReport:
    """Check growth, derivative, monotonicity and dissipativity conditions on samples.

    Every check records ``max(lhs - rhs)`` over the cloud, so a positive
    worst violation means the inequality fails somewhere.  The terminal bound
    ``|xi| <= M`` is audited only when an exit domain is configured, with
    states drawn inside that domain.
    """
    if int(sample_count) < 1:
        raise ValueError("sample_count must be >= 1")
    c = spec.constants
    c.check()
    rng, x, y, y2, z, v = _draw(spec, int(sample_count), seed, cloud)
    F = spec.generator
    zn = np.linalg.norm(z, axis=1)
    n = int(sample_count)

    f = F(x, y, z)
    gx = spec.generator_dx(x, y, z)
    gy = spec.generator_dy(x, y, z)
    gz = spec.generator_dz(x, y, z)
    dy = y - y2
    mono = dy * (f - F(x, y2, z)) + c.lam * dy ** 2
    f00 = F(x, np.zeros(n), np.zeros_like(z))

    A = spec.drift_matrix
    J = spec.drift_jac(x)
    Av = v @ A.T + np.einsum("nij,nj->ni", J, v)
    dissip = np.einsum("ni,ni->n", Av, v)

    raw = [
        ("growth", np.abs(f) - c.C * (1 + np.abs(y) + zn ** 2)),
        ("grad_z", np.linalg.norm(gz, axis=1) - c.C * (1 + zn)),
        ("grad_y", np.abs(gy) - c.C * (1 + zn) ** (2 * c.alpha)),
        ("monotone", mono),
        ("F00_bound", np.abs(f00) - c.K),
        ("grad_x", np.linalg.norm(gx, axis=1) - c.C),
        ("dissipative", dissip),
    ]
    if spec.has_exit:
        xs = _sample_domain(spec.stopping, rng, n)
        raw.append(("terminal_bound", np.abs(spec.terminal_fn(xs)) - c.M))

    checks = []
    for name, viol in raw:
        worst = float(np.max(viol)) if np.all(np.isfinite(viol)) else float("inf")
        checks.append(AssumptionCheck(name, n, worst, worst <= tol))
    return AssumptionReport(tuple(checks), tol)


def _sample_domain(domain, rng, n):
    if isinstance(domain, (Box, Ball)):
        return domain.sample(rng, n)
    raise TypeError(f"cannot sample domain {domain!r}")


def monotonicity_margin(spec: ProblemSpec, sample_count: int = 10_000, seed: int = 0,
                        cloud: SampleCloud = SampleCloud()) -> float:
    """Sampled sup of ``(y-y')(F(x,y,z)-F(x,y',z)) / |y-y'|^2``.

    The problem is lambda-monotone on the sample when the result is ``<= -lambda``.
    """
    if int(sample_count) < 1:
        raise ValueError("sample_count must be >= 1")
    _, x, y, y2, z, _ = _draw(spec, int(sample_count), seed, cloud)
    keep = np.abs(y - y2) > 1e-8
    x, y, y2, z = x[keep], y[keep], y2[keep], z[keep]
    F = spec.generator
    ratio = (F(x, y, z) - F(x, y2, z)) / (y - y2)
    return float(np.max(ratio))
