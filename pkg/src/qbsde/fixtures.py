"""Ready-made problem instances.

Each factory returns a :class:`~qbsde.model.ProblemSpec` (or, for the
control problems, a :class:`~qbsde.control.ControlSpec`) whose constants have
been checked by hand against the generator; the test suite re-audits them with
:func:`~qbsde.model.validate_assumptions`.
"""

from __future__ import annotations

import numpy as np

from .model import Ball, Box, Constants, ProblemSpec

__all__ = [
    "ou_cosine",
    "ou_bounded_quadratic",
    "ou_sine_bounded",
    "hjb_quadratic",
    "affine_constant",
    "exit_laplace",
    "coupled_2d",
    "linear_zero",
    "FIXTURES",
    "build_fixture",
    "lq_control",
    "CONTROL_FIXTURES",
    "build_control",
]


def _col(x, j=0):
    return x[:, j]


def _ou(a, sigma):
    return np.array([[float(a)]]), np.array([[float(sigma)]])


def ou_cosine(lam=1.0, a=-1.0, sigma=1.0, amplitude=1.0):
    """``F = -lam y + amplitude cos(x)`` on an Ornstein-Uhlenbeck state (z-free)."""
    A, S = _ou(a, sigma)
    C = max(lam, amplitude, 1e-12)
    return ProblemSpec(
        A, S,
        generator=lambda x, y, z: -lam * y + amplitude * np.cos(x[:, 0]),
        generator_dx=lambda x, y, z: (-amplitude * np.sin(x[:, 0]))[:, None],
        generator_dy=lambda x, y, z: np.full_like(y, -lam),
        generator_dz=lambda x, y, z: np.zeros_like(z),
        constants=Constants(C=C, alpha=0.5, lam=lam, K=amplitude, M=0.0),
        name="ou_cosine",
    )


def ou_bounded_quadratic(a=-1.0, sigma=1.0):
    """``F = -y + z^2 / (2 (1 + z^2)) + cos(x)``."""
    A, S = _ou(a, sigma)

    def F(x, y, z):
        q = z[:, 0] ** 2
        return -y + 0.5 * q / (1 + q) + np.cos(x[:, 0])

    return ProblemSpec(
        A, S,
        generator=F,
        generator_dx=lambda x, y, z: (-np.sin(x[:, 0]))[:, None],
        generator_dy=lambda x, y, z: -np.ones_like(y),
        generator_dz=lambda x, y, z: (z[:, 0] / (1 + z[:, 0] ** 2) ** 2)[:, None],
        constants=Constants(C=1.5, alpha=0.5, lam=1.0, K=1.0, M=0.0),
        name="ou_bounded_quadratic",
    )


def ou_sine_bounded(a=-1.0, sigma=1.0):
    """``F = -y + sin(x)/2 + z^2 / (4 (1 + z^2))``."""
    A, S = _ou(a, sigma)

    def F(x, y, z):
        q = z[:, 0] ** 2
        return -y + 0.5 * np.sin(x[:, 0]) + 0.25 * q / (1 + q)

    return ProblemSpec(
        A, S,
        generator=F,
        generator_dx=lambda x, y, z: (0.5 * np.cos(x[:, 0]))[:, None],
        generator_dy=lambda x, y, z: -np.ones_like(y),
        generator_dz=lambda x, y, z: (0.5 * z[:, 0] / (1 + z[:, 0] ** 2) ** 2)[:, None],
        constants=Constants(C=1.0, alpha=0.5, lam=1.0, K=1.0, M=0.0),
        name="ou_sine_bounded",
    )


def hjb_quadratic(lam=1.0, a=-1.0, sigma=1.0):
    """``F = -lam y - z^2/4 + 1 + cos(x)``: the closed-form Hamiltonian of
    ``g = u^2 + 1 + cos(x)``, ``r = u``."""
    A, S = _ou(a, sigma)
    return ProblemSpec(
        A, S,
        generator=lambda x, y, z: -lam * y - 0.25 * z[:, 0] ** 2 + 1 + np.cos(x[:, 0]),
        generator_dx=lambda x, y, z: (-np.sin(x[:, 0]))[:, None],
        generator_dy=lambda x, y, z: np.full_like(y, -lam),
        generator_dz=lambda x, y, z: (-0.5 * z[:, 0])[:, None],
        constants=Constants(C=max(2.0, lam), alpha=0.5, lam=lam, K=2.0, M=0.0),
        name="hjb_quadratic",
    )


def affine_constant(lam=1.0, kappa=0.5, a=-1.0, sigma=1.0, dim=1):
    """``F = -lam y + kappa``, whose stationary solution is ``kappa / lam``."""
    A = a * np.eye(dim)
    S = sigma * np.eye(dim)
    return ProblemSpec(
        A, S,
        generator=lambda x, y, z: -lam * y + kappa,
        generator_dx=lambda x, y, z: np.zeros_like(x),
        generator_dy=lambda x, y, z: np.full_like(y, -lam),
        generator_dz=lambda x, y, z: np.zeros_like(z),
        constants=Constants(C=max(lam, abs(kappa), 1e-12), alpha=0.5, lam=lam, K=abs(kappa), M=0.0),
        name="affine_constant",
    )


def linear_zero(lam=1.0, a=0.0, sigma=1.0, M=1.0):
    """``F = -lam y`` with no source; ``M`` bounds the terminal values used with it."""
    A, S = _ou(a, sigma)
    return ProblemSpec(
        A, S,
        generator=lambda x, y, z: -lam * y,
        generator_dx=lambda x, y, z: np.zeros_like(x),
        generator_dy=lambda x, y, z: np.full_like(y, -lam),
        generator_dz=lambda x, y, z: np.zeros_like(z),
        constants=Constants(C=lam, alpha=0.5, lam=lam, K=0.0, M=M),
        name="linear_zero",
    )


def exit_laplace(lam=1.0, half_width=1.0, a=-1.0, sigma=1.0, kappa=0.0):
    """Exit from ``(-w, w)`` with ``xi = 1`` and ``F = -lam y + kappa``.

    With ``kappa = 0`` the solution is the Laplace transform ``E[e^{-lam tau}]``.
    """
    A, S = _ou(a, sigma)
    return ProblemSpec(
        A, S,
        generator=lambda x, y, z: -lam * y + kappa,
        generator_dx=lambda x, y, z: np.zeros_like(x),
        generator_dy=lambda x, y, z: np.full_like(y, -lam),
        generator_dz=lambda x, y, z: np.zeros_like(z),
        terminal_fn=lambda x: np.ones(x.shape[0]),
        stopping=Box([-half_width], [half_width]),
        constants=Constants(C=max(lam, abs(kappa), 1e-12), alpha=0.5, lam=lam, K=abs(kappa), M=1.0),
        name="exit_laplace",
    )


def exit_ball_2d(lam=1.0, radius=1.5):
    """Two-dimensional exit problem on a disc with ``xi = cos(x_1)`` and a cosine source."""
    A = -np.eye(2)
    S = np.eye(2)

    def F(x, y, z):
        return -lam * y + 0.5 * np.cos(x[:, 0] + x[:, 1])

    def Fx(x, y, z):
        s = -0.5 * np.sin(x[:, 0] + x[:, 1])
        return np.stack([s, s], axis=1)

    return ProblemSpec(
        A, S,
        generator=F,
        generator_dx=Fx,
        generator_dy=lambda x, y, z: np.full_like(y, -lam),
        generator_dz=lambda x, y, z: np.zeros_like(z),
        terminal_fn=lambda x: np.cos(x[:, 0]),
        stopping=Ball([0.0, 0.0], radius),
        constants=Constants(C=max(lam, 1.0), alpha=0.5, lam=lam, K=0.5, M=1.0),
        name="exit_ball_2d",
    )


def coupled_2d():
    """Two-dimensional state with a rotation, a dissipative nonlinearity and
    ``F = -y + cos(x_1)/2 + sin(x_2)/2 + |z|^2 / (4 (1 + |z|^2))``."""
    A = np.array([[-1.0, 0.5], [-0.5, -1.0]])
    S = np.array([[1.0, 0.0], [0.5, 1.0]])

    def b(x):
        return -0.2 * np.tanh(x)

    def jac(x):
        n, d = x.shape
        out = np.zeros((n, d, d))
        idx = np.arange(d)
        out[:, idx, idx] = -0.2 / np.cosh(x) ** 2
        return out

    def F(x, y, z):
        q = np.sum(z ** 2, axis=1)
        return -y + 0.5 * np.cos(x[:, 0]) + 0.5 * np.sin(x[:, 1]) + 0.25 * q / (1 + q)

    def Fz(x, y, z):
        q = np.sum(z ** 2, axis=1)
        return 0.5 * z / ((1 + q) ** 2)[:, None]

    return ProblemSpec(
        A, S,
        generator=F,
        generator_dx=lambda x, y, z: np.stack([-0.5 * np.sin(x[:, 0]), 0.5 * np.cos(x[:, 1])], axis=1),
        generator_dy=lambda x, y, z: -np.ones_like(y),
        generator_dz=Fz,
        drift_fn=b,
        drift_jac=jac,
        constants=Constants(C=1.25, alpha=0.5, lam=1.0, K=1.0, M=0.0),
        name="coupled_2d",
    )


FIXTURES = {
    "ou_cosine": ou_cosine,
    "ou_bounded_quadratic": ou_bounded_quadratic,
    "ou_sine_bounded": ou_sine_bounded,
    "hjb_quadratic": hjb_quadratic,
    "affine_constant": affine_constant,
    "linear_zero": linear_zero,
    "exit_laplace": exit_laplace,
    "exit_ball_2d": exit_ball_2d,
    "coupled_2d": coupled_2d,
}


def build_fixture(name, **params):
    try:
        factory = FIXTURES[name]
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; known: {sorted(FIXTURES)}") from None
    return factory(**params)


def lq_control(lam=1.0, a=-1.0, sigma=1.0, bound=None):
    """Control with ``r = u`` and ``g = u^2 + 1 + cos(x)`` on an OU state.

    Unconstrained, the Hamiltonian is ``-z^2/4 + 1 + cos(x) - lam y`` (the
    :func:`hjb_quadratic` generator) with minimiser ``u* = -z/2``.  With
    ``bound`` the controls are restricted to ``[-bound, bound]``.
    """
    from .control import ControlSpec

    A, S = _ou(a, sigma)
    cset = None if bound is None else Box([-bound], [bound])
    return ControlSpec(
        A, S, control_dim=1,
        r=lambda x, u: u.copy(),
        r_du=lambda x, u: np.ones((x.shape[0], 1, 1)),
        r_dx=lambda x, u: np.zeros((x.shape[0], 1, 1)),
        g=lambda x, u: u[:, 0] ** 2 + 1.0 + np.cos(x[:, 0]),
        g_du=lambda x, u: 2.0 * u,
        g_dx=lambda x, u: (-np.sin(x[:, 0]))[:, None],
        constants=Constants(C=max(2.0, lam), alpha=0.5, lam=lam, K=2.0, M=0.0),
        control_set=cset, coercivity=(1.0, 1.0), C_r=1.0, C_g=2.0,
        name="lq_control" if bound is None else "lq_control_box",
    )


def lq_state_cost(lam=1.0, a=-1.0, sigma=1.0):
    """``g = x^2 + u^2``, ``r = u``: the running cost of the OU second-moment check.

    The state cost is unbounded in ``x``, so this is used only for cost
    estimation, not as a Hamiltonian generator with bounded constants.
    """
    from .control import ControlSpec

    A, S = _ou(a, sigma)
    return ControlSpec(
        A, S, control_dim=1,
        r=lambda x, u: u.copy(),
        r_du=lambda x, u: np.ones((x.shape[0], 1, 1)),
        r_dx=lambda x, u: np.zeros((x.shape[0], 1, 1)),
        g=lambda x, u: x[:, 0] ** 2 + u[:, 0] ** 2,
        g_du=lambda x, u: 2.0 * u,
        g_dx=lambda x, u: 2.0 * x,
        constants=Constants(C=max(1.0, lam), alpha=0.5, lam=lam, K=1.0, M=0.0),
        coercivity=(1.0, 1.0), C_r=1.0, C_g=1.0, name="lq_state_cost",
    )


CONTROL_FIXTURES = {
    "lq_control": lq_control,
    "lq_state_cost": lq_state_cost,
}


def build_control(name, **params):
    try:
        factory = CONTROL_FIXTURES[name]
    except KeyError:
        raise KeyError(f"unknown control fixture {name!r}; known: {sorted(CONTROL_FIXTURES)}") from None
    return factory(**params)
