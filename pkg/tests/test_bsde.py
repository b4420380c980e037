import numpy as np
import pytest

from qbsde import fixtures
from qbsde.bsde import LinearCoeffs, PicardError, bmo_estimate, solve_backward, solve_linear_backward
from qbsde.forward import TimeGrid, simulate
from qbsde.oracle import tree_solve
from qbsde.regression import RegressionConfig

from conftest import make_spec


def ensemble(spec, T=2.0, n=64, P=2000, seed=0, x0=0.0):
    return simulate(spec, TimeGrid(T, n), P, seed, np.atleast_1d(x0))


def test_linear_decay_of_constant_terminal():
    lam, c, T, n = 1.0, 0.8, 2.0, 64
    spec = make_spec(lambda x, y, z: -lam * y, lam=lam, K=0.0, M=1.0)
    sol = solve_backward(spec, ensemble(spec, T, n), terminal=c)
    dt = T / n
    assert sol.y0 == pytest.approx(c * (1 + lam * dt) ** (-n), rel=1e-8)
    assert abs(sol.y0 - c * np.exp(-lam * T)) < 2 * lam * dt * c
    assert np.max(np.abs(sol.Z)) < 1e-6


def test_affine_ode():
    lam, T, n = 1.0, 2.0, 64
    spec = make_spec(lambda x, y, z: 1 - lam * y, lam=lam, K=1.0)
    sol = solve_backward(spec, ensemble(spec, T, n))
    assert abs(sol.y0 - (1 - np.exp(-lam * T)) / lam) < T / n
    assert np.max(np.abs(sol.Z)) < 1e-6
    assert sol.clamp_count == 0 and sol.picard_counts.max() <= 10


def test_bounded_quadratic_matches_lattice(oracle_values):
    spec = fixtures.ou_bounded_quadratic()
    sol = solve_backward(spec, ensemble(spec, 2.0, 64, P=40_000, seed=3))
    ref = oracle_values["bounded_quadratic_lattice_T2_N64"]["value"]
    assert abs(sol.y0 - ref) <= 0.01 * abs(ref)


def test_picard_failure_and_step_guard():
    spec = make_spec(lambda x, y, z: -y + np.cos(x[:, 0]))
    ens = ensemble(spec, 1.0, 4, P=200)
    with pytest.raises(PicardError):
        solve_backward(spec, ens, RegressionConfig(picard_max=1, picard_tol=1e-300))
    stiff = make_spec(lambda x, y, z: -30 * y, Fy=lambda x, y, z: np.full_like(y, -30.0), lam=30.0,
                      C=30.0)
    with pytest.raises(ValueError, match="time step"):
        solve_backward(stiff, ens)


def test_clamp_counts_exceedances():
    spec = make_spec(lambda x, y, z: -y, K=0.0, M=0.1)
    sol = solve_backward(spec, ensemble(spec, 1.0, 8, P=100), terminal=5.0)
    assert np.max(np.abs(sol.Y[:, :-1])) <= 0.1
    # only the first backward step exceeds; later steps start from the clamped value
    assert sol.clamp_count == 100 and sol.clamp_fraction == pytest.approx(1 / 8)


def test_linear_equality_case():
    lam, rho, xi, T, n = 1.0, 0.4, 0.5, 3.0, 96
    spec = make_spec(lambda x, y, z: -y)
    ens = ensemble(spec, T, n, P=500)
    P, N1 = ens.X.shape[:2]
    coeffs = LinearCoeffs(np.full((P, N1), rho), np.full((P, N1), -lam), np.zeros((P, N1, 1)), rho)
    sol = solve_linear_backward(coeffs, xi, ens)
    cont = np.exp(-lam * T) * xi + rho * (1 - np.exp(-lam * T)) / lam
    assert abs(sol.y0 - cont) <= 2 * T / n
    zero = solve_linear_backward(LinearCoeffs(np.zeros((P, N1)), np.full((P, N1), -lam),
                                              np.zeros((P, N1, 1))), 0.0, ens)
    assert np.all(zero.Y == 0) and np.all(zero.Z == 0)


def test_bmo_diagnostic():
    spec = make_spec(lambda x, y, z: -y, K=0.0)
    sol = solve_backward(spec, ensemble(spec, 1.0, 16, P=500), terminal=1.0)
    assert bmo_estimate(sol) == pytest.approx(0.0, abs=1e-18)
    z0, T = 0.3, 2.0
    sol.Z[:, :-1] = z0
    sol.ensemble.grid  # same grid
    spec2 = make_spec(lambda x, y, z: -y)
    s2 = solve_backward(spec2, ensemble(spec2, T, 32, P=500), terminal=0.0)
    s2.Z[:, :-1] = z0
    assert bmo_estimate(s2) == pytest.approx(z0 ** 2 * T, rel=1e-8)


def test_bmo_finite_and_stable_on_quadratic_fixture():
    spec = fixtures.ou_bounded_quadratic()
    a = solve_backward(spec, ensemble(spec, 2.0, 32, P=4000, seed=1))
    b = solve_backward(spec, ensemble(spec, 2.0, 32, P=8000, seed=1))
    assert np.isfinite(a.bmo) and a.bmo > 0
    assert abs(a.bmo - b.bmo) <= 0.2 * a.bmo
