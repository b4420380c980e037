import math

import numpy as np
import pytest
from scipy.integrate import quad

from qbsde import fixtures
from qbsde.oracle import (NewtonDivergence, exit_value_1d, fd_hjb_1d, quadrature_value_1d,
                          tree_solve)

from conftest import make_spec


def test_frozen_values_reproduce(oracle_values):
    cos = fixtures.ou_cosine()
    v = oracle_values["cosine_quadrature_T8_x0"]
    assert quadrature_value_1d(cos, 0.0, 8.0, tol=1e-12) == pytest.approx(v["value"], abs=v["tolerance"])
    bq = fixtures.ou_bounded_quadratic()
    v = oracle_values["bounded_quadratic_tree_T2_N8"]
    assert tree_solve(bq, 2.0, 8, q=5, method="tree").y0 == pytest.approx(v["value"], abs=v["tolerance"])
    v = oracle_values["exit_laplace_x0"]
    assert exit_value_1d(fixtures.exit_laplace(), 0.0) == pytest.approx(v["value"], abs=v["tolerance"])
    assert v["value"] == pytest.approx(oracle_values["exit_laplace_closed_form"]["value"], abs=1e-9)


def test_quadrature_against_scipy():
    # for a = -1, sigma = 1, x = 0: E cos(X_s) = exp(-(1 - e^{-2s}) / 4)
    ref, _ = quad(lambda s: math.exp(-s) * math.exp(-(1 - math.exp(-2 * s)) / 4), 0, 8, epsabs=1e-13)
    assert quadrature_value_1d(fixtures.ou_cosine(), 0.0, 8.0, tol=1e-12) == pytest.approx(ref, abs=1e-10)


def test_quadrature_rejects_z_dependence():
    with pytest.raises(ValueError):
        quadrature_value_1d(fixtures.hjb_quadratic(), 0.0, 2.0)


@pytest.mark.parametrize("method", ["tree", "lattice"])
def test_tree_constant_source_exact(method):
    lam, kappa, T, n = 1.0, 1.0, 2.0, 8
    spec = make_spec(lambda x, y, z: -lam * y + kappa, K=kappa)
    dt = T / n
    exact = kappa * (1 - (1 + lam * dt) ** (-n)) / lam
    assert tree_solve(spec, T, n, method=method).y0 == pytest.approx(exact, abs=1e-10)


def test_tree_odd_source_vanishes_at_origin():
    spec = make_spec(lambda x, y, z: -y + np.sin(x[:, 0]))
    r = tree_solve(spec, 2.0, 8, q=5, method="tree")
    assert abs(r.y0) <= 1e-12


def test_lattice_quadrature_order_converged(oracle_values):
    assert oracle_values["bounded_quadratic_lattice_q7_gap"]["value"] <= 1e-4


def test_tree_input_guards():
    spec = fixtures.ou_cosine()
    with pytest.raises(ValueError):
        tree_solve(spec, 1.0, 4, q=9)
    with pytest.raises(MemoryError):
        tree_solve(spec, 1.0, 13, q=5, method="tree")


def test_fd_constant_solution():
    lam, c = 1.0, 0.7
    spec = make_spec(lambda x, y, z: -lam * y + lam * c, K=lam * c)
    dense = fd_hjb_1d(spec)
    np.testing.assert_allclose(dense.v, c, atol=1e-10)


def test_fd_boundary_placement_insensitive():
    spec = fixtures.hjb_quadratic()
    std = 1 / math.sqrt(2)
    v5 = fd_hjb_1d(spec, domain=(-5 * std, 5 * std))(np.array([0.0]))[0]
    v7 = fd_hjb_1d(spec, domain=(-7 * std, 7 * std))(np.array([0.0]))[0]
    assert abs(v5 - v7) <= 1e-4
    with pytest.raises(ValueError):
        fd_hjb_1d(spec, domain=(-2 * std, 2 * std))


def test_fd_does_not_mutate_spec():
    spec = fixtures.hjb_quadratic()
    before = spec.generator(np.zeros((3, 1)), np.zeros(3), np.ones((3, 1)))
    fd_hjb_1d(spec)
    after = spec.generator(np.zeros((3, 1)), np.zeros(3), np.ones((3, 1)))
    np.testing.assert_array_equal(before, after)


def test_exit_requires_interval():
    with pytest.raises(ValueError):
        exit_value_1d(fixtures.ou_cosine(), 0.0)
    assert issubclass(NewtonDivergence, RuntimeError)
