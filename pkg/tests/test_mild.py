import numpy as np
import pytest

from qbsde import fixtures
from qbsde.horizon import solve_truncated
from qbsde.mild import (CoverageError, ValueField, _exp_trapezoid, evaluate_value,
                        identification_residual, mild_residual)
from qbsde.regression import RegressionConfig

from conftest import make_spec


def const_field(c, lo=-6.0, hi=6.0):
    pts = np.linspace(lo, hi, 7)[:, None]
    return ValueField.from_function(pts, lambda x: np.full(len(x), c), lambda x: np.zeros((len(x), 1)))


def test_exponential_trapezoid_exact_for_linear():
    lam, T, n = 0.7, 2.0, 16
    w = _exp_trapezoid(lam, T / n, n)
    t = np.linspace(0, T, n + 1)
    f = 1.5 - 0.3 * t
    exact = 1.5 * (1 - np.exp(-lam * T)) / lam - 0.3 * (1 - np.exp(-lam * T) * (1 + lam * T)) / lam ** 2
    assert w @ f == pytest.approx(exact, rel=1e-12)


@pytest.mark.parametrize("c", [0.0, 0.8])
def test_trivial_fixed_points_exact(c):
    lam = 1.0
    spec = make_spec(lambda x, y, z: -lam * y + lam * c, K=lam * c)
    field = const_field(c)
    for x in (-1.0, 0.0, 1.0):
        r = mild_residual(spec, [x], 1.0, field, mc_paths=2000)
        assert abs(r.residual) <= 1e-10 and r.ci <= 1e-10


def test_constant_value_from_solver():
    spec = fixtures.affine_constant(kappa=0.5)
    f = evaluate_value(spec, np.linspace(-2, 2, 5)[:, None], n_paths=1000)
    np.testing.assert_allclose(f.v, 0.5, atol=0.01)
    np.testing.assert_allclose(f.g, 0.0, atol=1e-12)
    zero = evaluate_value(fixtures.affine_constant(kappa=0.0), [[0.0], [1.0]], n_paths=500, refine=False)
    assert np.all(zero.v == 0)


def test_cosine_field_and_residual(oracle_values):
    spec = fixtures.ou_cosine()
    pts = np.linspace(-3.5, 3.5, 9)[:, None]
    field = evaluate_value(spec, pts, n_paths=20_000)
    ref = oracle_values["cosine_quadrature_T40_x0"]["value"]
    v0 = field.value([[0.0]])[0]
    assert abs(v0 - ref) <= max(0.01 * ref, 3 * field.ci[4])
    sym = field.value([[-1.0], [1.0]])
    assert abs(sym[0] - sym[1]) <= 2 * field.ci.max() + field.delta_v
    r = mild_residual(spec, [0.0], 1.0, field, mc_paths=50_000)
    assert r.passed, r


def test_identification_constant_fixture():
    spec = fixtures.affine_constant(kappa=0.5)
    bsol = solve_truncated(spec, [0.0], 20.0, 16, RegressionConfig(), 0, 2000)
    field = const_field(0.5, -8, 8)
    res = identification_residual(spec, bsol, field, trunc_tol=1e-6)
    # only the truncation remainder of the terminal condition is left
    assert res["y_sup"] <= 2e-6 and res["z_sup"] <= 1e-8


def test_identification_is_stationary_in_time():
    spec = fixtures.ou_cosine()
    field = evaluate_value(spec, np.linspace(-3.5, 3.5, 9)[:, None], n_paths=8000, refine=False,
                           richardson=False)
    bsol = solve_truncated(spec, [0.0], 10.0, 16, RegressionConfig(), 2, 8000)
    res = identification_residual(spec, bsol, field, per_step=64)
    steps = [s for s in res["per_step"] if s[0] > 0]
    early = np.mean([s[1] for s in steps[: len(steps) // 2]])
    late = np.mean([s[1] for s in steps[len(steps) // 2:]])
    assert abs(early - late) <= 0.5 * max(early, late) + 2e-3


def test_coverage_error():
    spec = fixtures.ou_cosine()
    narrow = const_field(0.0, -0.1, 0.1)
    with pytest.raises(CoverageError):
        mild_residual(spec, [0.0], 1.0, narrow, mc_paths=1000)
