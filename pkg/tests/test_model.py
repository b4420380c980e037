import numpy as np
import pytest

from qbsde import fixtures
from qbsde.model import (Ball, Box, Constants, WholeSpace, monotonicity_margin, theoretical_bounds,
                         validate_assumptions)

from conftest import make_spec

SHIPPED = ["ou_cosine", "ou_bounded_quadratic", "ou_sine_bounded", "hjb_quadratic",
           "affine_constant", "linear_zero", "exit_laplace", "exit_ball_2d", "coupled_2d"]


def test_bounds_from_constants():
    b = theoretical_bounds(Constants(C=1, alpha=0.5, lam=0.5, K=0.5, M=1))
    assert b.y_bound == pytest.approx(2.0)
    assert theoretical_bounds(Constants(C=1, alpha=0.5, lam=1, K=0, M=1)).beta == pytest.approx(3.0)
    zero = theoretical_bounds(Constants(C=1, alpha=0.5, lam=3.7, K=0, M=0))
    assert zero.y_bound == 0.0
    assert zero.gradient_bound == pytest.approx(1 / 3.7)


@pytest.mark.parametrize("bad", [dict(lam=0.0), dict(alpha=1.0), dict(K=-1.0)])
def test_constants_rejected(bad):
    kw = dict(C=1, alpha=0.5, lam=1, K=1, M=0)
    kw.update(bad)
    with pytest.raises(ValueError):
        Constants(**kw).check()


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_fixtures_satisfy_assumptions(name):
    spec = fixtures.build_fixture(name)
    rep = validate_assumptions(spec, sample_count=10_000, tol=1e-12)
    assert rep.passed, [c for c in rep.checks if not c.passed]
    assert monotonicity_margin(spec) <= -spec.constants.lam + 1e-12


def test_saturating_quadratic_example_passes():
    F = lambda x, y, z: -y + 0.5 * np.sin(x[:, 0]) + 0.25 * z[:, 0] ** 2 / (1 + z[:, 0] ** 2)
    Fx = lambda x, y, z: (0.5 * np.cos(x[:, 0]))[:, None]
    Fz = lambda x, y, z: (0.5 * z[:, 0] / (1 + z[:, 0] ** 2) ** 2)[:, None]
    spec = make_spec(F, Fx=Fx, Fz=Fz, C=1, lam=1, K=1)
    rep = validate_assumptions(spec)
    assert rep.passed
    assert len(rep.checks) == 7


def test_anti_monotone_generator_fails():
    spec = make_spec(lambda x, y, z: y, Fy=lambda x, y, z: np.ones_like(y))
    rep = validate_assumptions(spec)
    mono = rep["monotone"]
    assert not mono.passed
    # (y - y')^2 + lambda (y - y')^2 with |y - y'| up to 10
    assert 100 < mono.worst_violation <= 2 * 100


def test_dissipativity_of_stable_drift():
    spec = make_spec(lambda x, y, z: -y)
    assert validate_assumptions(spec)["dissipative"].worst_violation <= 0


def test_monotonicity_margin_values():
    assert monotonicity_margin(make_spec(lambda x, y, z: -2 * y + z[:, 0] ** 2)) == pytest.approx(-2.0)
    assert monotonicity_margin(make_spec(lambda x, y, z: -y - y ** 3)) <= -1.0
    m = monotonicity_margin(make_spec(lambda x, y, z: -y + 0.5 * np.sin(y)), seed=0)
    assert -1.5 <= m <= -0.5
    assert m == monotonicity_margin(make_spec(lambda x, y, z: -y + 0.5 * np.sin(y)), seed=0)


def test_audit_reproducible_and_rejects_empty_cloud():
    spec = fixtures.ou_cosine()
    a = validate_assumptions(spec, seed=3).to_rows()
    assert a == validate_assumptions(spec, seed=3).to_rows()
    with pytest.raises(ValueError):
        validate_assumptions(spec, sample_count=0)


def test_domains():
    box = Box([-1.0], [1.0])
    assert box.contains(np.array([[0.0], [1.0]])).tolist() == [True, False]
    dist, var = box.face_distances(np.array([[0.25]]), np.array([[4.0]]))
    np.testing.assert_allclose(dist, [[1.25, 0.75]])
    np.testing.assert_allclose(var, [[4.0, 4.0]])
    ball = Ball([0.0, 0.0], 2.0)
    dist, var = ball.face_distances(np.array([[1.0, 0.0]]), np.diag([3.0, 5.0]))
    np.testing.assert_allclose(dist, [[1.0]])
    np.testing.assert_allclose(var, [[3.0]])
    np.testing.assert_allclose(ball.project(np.array([[4.0, 0.0]])), [[2.0, 0.0]])
    with pytest.raises(ValueError):
        Box([1.0], [0.0])
    assert WholeSpace().contains(np.zeros((3, 2))).all()


def test_exit_spec_needs_terminal():
    with pytest.raises(ValueError):
        make_spec(lambda x, y, z: -y, stopping=Box([-1.0], [1.0]))
    assert make_spec(lambda x, y, z: -y, stopping=WholeSpace()).stopping is None
