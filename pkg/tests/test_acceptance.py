"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdicts are repeated in
the "acceptance criteria" section of the terminal summary.
"""

import json
import math
import shutil
import subprocess
import sys

import numpy as np
import pytest

from qbsde import fixtures
from qbsde.bsde import LinearCoeffs, solve_backward, solve_linear_backward
from qbsde.control import (closed_loop_run, fundamental_relation_check, hamiltonian_problem,
                           synthesize_policy)
from qbsde.forward import TimeGrid, simulate
from qbsde.gradient import gradient_bound_check, gradient_fd, gradient_pipeline
from qbsde.horizon import cauchy_table, solve_truncated
from qbsde.mild import ValueField, evaluate_value, identification_residual, mild_residual
from qbsde.model import theoretical_bounds
from qbsde.oracle import fd_hjb_1d
from qbsde.regression import RegressionConfig

from conftest import record

pytestmark = pytest.mark.slow

A_PRIORI = ["ou_cosine", "ou_bounded_quadratic", "ou_sine_bounded", "hjb_quadratic", "coupled_2d"]
GRADIENT = A_PRIORI


@pytest.fixture(scope="module")
def cosine_cauchy():
    return cauchy_table(fixtures.ou_cosine(), [0.0], [2.0, 4.0, 6.0, 8.0], n_paths=100_000, seed=21)


@pytest.fixture(scope="module")
def lq_fields():
    """Value fields of the two control fixtures on nine points of [-3, 3].

    The fields are computed at the simulation step (no refinement), which is
    what the policy and the cost integrals see.
    """
    pts = np.linspace(-3.0, 3.0, 9)[:, None]
    out = {}
    for bound in (None, 0.1):
        ctrl = fixtures.lq_control(bound=bound)
        field = evaluate_value(hamiltonian_problem(ctrl), pts, n_paths=4000, seed=0, refine=False)
        out[bound] = (ctrl, field)
    return out


# 1 -------------------------------------------------------------------------------


def test_c1_a_priori_bound():
    T, N, P = 4.0, 64, 100_000
    c = 1.0
    details, ok = [], True
    for name in A_PRIORI:
        spec = fixtures.build_fixture(name)
        b = theoretical_bounds(spec)
        ens = simulate(spec, TimeGrid(T, N), P, 11, np.zeros(spec.state_dim))
        sol = solve_backward(spec, ens, clamp=False, bmo=False)
        Y = np.abs(sol.Y[:, :-1])
        ymax = float(Y.max())
        clamp_frac = float((Y > b.y_bound).mean())
        good = ymax <= b.y_bound + c * ens.grid.dt and clamp_frac < 1e-3
        ok &= good
        details.append(f"{name} max|Y|={ymax:.4f}<={b.y_bound:.3f}+{c * ens.grid.dt:.4f} clamp={clamp_frac:.1e}")
    assert record("C1", ok, "; ".join(details))


# 2 -------------------------------------------------------------------------------


def test_c2_truncation_rate(cosine_cauchy):
    tab = cosine_cauchy
    rows = [f"({r['n']:g},{r['m']:g}) gap={r['gap']:.2e} bound={r['bound'] + t:.2e} ci={r['ci']:.1e}"
            for r, t in zip(tab.rows, tab.tol_disc)]
    slope = "n/a (below noise floor)" if tab.slope is None else f"{tab.slope:.3f}"
    ok = tab.rows_pass and tab.slope_pass
    assert record("C2", ok, f"slope={slope} (<= {-0.75 * tab.lam:.2f}); " + "; ".join(rows))


# 3 -------------------------------------------------------------------------------


def test_c3_zero_terminal_rate(cosine_cauchy):
    spec = fixtures.ou_cosine()
    lam, K = spec.constants.lam, spec.constants.K
    y = dict(zip(cosine_cauchy.horizons, zip(cosine_cauchy.y0, cosine_cauchy.ci)))
    dt = 1.0 / 16.0
    ok, details = True, []
    for n in (2.0 / lam, 4.0 / lam):
        (a, ca), (b, cb) = y[n], y[2 * n]
        disc = (K / lam) * max(0.0, (1 + lam * dt) ** (-n / dt) - math.exp(-lam * n))
        bound = (K / lam) * math.exp(-lam * n) + disc
        good = abs(a - b) <= bound + 3 * (ca + cb)
        ok &= good
        details.append(f"n={n:g}: |y0(n)-y0(2n)|={abs(a - b):.2e} <= {bound:.2e}+3ci({ca + cb:.1e})")
    assert record("C3", ok, "; ".join(details))


# 4 -------------------------------------------------------------------------------


def _linear_bound(xi, rho, lam, T, dt):
    """Continuous bound and the implicit-scheme allowance."""
    n = round(T / dt)
    cont = math.exp(-lam * T) * xi + rho * (1 - math.exp(-lam * T)) / lam
    q = (1 + lam * dt) ** (-n)
    disc = q * xi + rho * (1 - q) / lam
    return cont, max(0.0, disc - cont)


def test_c4_linear_bsde_bound():
    lam, rho, xi, T, N, P = 1.0, 0.4, 0.5, 3.0, 96, 20_000
    spec = fixtures.linear_zero(a=-1.0)
    ens = simulate(spec, TimeGrid(T, N), P, 31, [0.0])
    dt = ens.grid.dt
    X = ens.X[..., 0]
    cont, tol = _linear_bound(xi, rho, lam, T, dt)
    # equality case: deterministic coefficients a = -lam, psi = rho, b = 0
    eq = solve_linear_backward(LinearCoeffs(np.full_like(X, rho), np.full_like(X, -lam),
                                            np.zeros(X.shape + (1,)), rho), xi, ens)
    eq_gap = abs(eq.y0 - cont)
    ok = eq_gap <= 2 * dt
    details = [f"equality |U0-bound|={eq_gap:.2e} <= 2dt={2 * dt:.3f}"]
    rng = np.random.default_rng(4)
    for j in range(3):
        w, ph, beta, kappa = rng.uniform(0.5, 2.0), rng.uniform(0, 2 * math.pi), rng.uniform(0.3, 1.5), rng.uniform(0, 1)
        b = (beta * np.sin(w * X + ph))[..., None]
        psi = rho * np.cos(w * X - ph)
        a = -lam - kappa * np.sin(X) ** 2
        term = xi * np.cos(ens.X[:, -1, 0] + ph)
        sol = solve_linear_backward(LinearCoeffs(psi, a, b, rho), term, ens)
        sup = float(np.max(np.abs(sol.Y[:, 0])))
        good = sup <= cont + tol + 3 * sol.y0_ci
        ok &= good
        details.append(f"random b #{j}: sup|U0|={sup:.4f} <= {cont:.4f}+{tol:.1e}+3ci")
    assert record("C4", ok, "; ".join(details))


# 5 -------------------------------------------------------------------------------


def test_c5_gradient():
    ok, details = True, []
    for name in GRADIENT:
        spec = fixtures.build_fixture(name)
        bounds = theoretical_bounds(spec)
        d = spec.state_dim
        x0, h = np.full(d, 0.5), np.eye(d)[0]
        g, bsol, var = gradient_pipeline(spec, x0, h, 4.0, n_paths=20_000, seed=4)
        fd = gradient_fd(spec, x0, h, 0.01, 4.0, n_paths=20_000, seed=4)
        dt = bsol.grid.dt
        fd_ok = abs(g.u0 - fd.value) <= max(1e-2 * abs(g.u0), 3 * (g.ci + fd.ci))
        margin = gradient_bound_check(g, bounds)
        sup_ok = margin >= -10 * dt * bounds.gradient_bound * np.linalg.norm(h)
        dnorm = float(np.max(np.linalg.norm(var.D, axis=-1)))
        var_ok = dnorm <= np.linalg.norm(h) * (1 + 10 * dt)
        ok &= fd_ok and sup_ok and var_ok
        details.append(f"{name} U0={g.u0:.4f} fd={fd.value:.4f} bound margin={margin:.3f} |DX h|={dnorm:.3f}")
    assert record("C5", ok, "; ".join(details))


# 6 -------------------------------------------------------------------------------


def test_c6_mild_fixed_point():
    pts = np.linspace(-3.5, 3.5, 9)[:, None]
    ok, details = True, []
    for name in ("ou_cosine", "ou_sine_bounded"):
        spec = fixtures.build_fixture(name)
        field = evaluate_value(spec, pts, n_paths=20_000, seed=0)
        for x in (-1.0, 0.0, 1.0):
            r = mild_residual(spec, [x], 1.0, field, mc_paths=50_000, seed=1)
            good = abs(r.residual) <= 3 * r.ci + r.interp_tol
            ok &= good
            details.append(f"{name} x={x:g} res={r.residual:.1e} (3ci={3 * r.ci:.1e}, tol={r.interp_tol:.1e})")
    grid = np.linspace(-8, 8, 9)[:, None]
    for c, spec in ((0.5, fixtures.affine_constant(kappa=0.5)), (0.0, fixtures.linear_zero(a=-1.0))):
        field = ValueField.from_function(grid, lambda x, c=c: np.full(len(x), c),
                                         lambda x: np.zeros((len(x), 1)))
        worst = max(abs(mild_residual(spec, [x], 1.0, field, mc_paths=5000).residual) for x in (-1, 0, 1))
        ok &= worst <= 1e-10
        details.append(f"{spec.name} exact residual={worst:.1e}")
    assert record("C6", ok, "; ".join(details))


# 7 -------------------------------------------------------------------------------


def test_c7_identification():
    spec = fixtures.ou_cosine()
    b = theoretical_bounds(spec)
    pts = np.linspace(-3.5, 3.5, 9)[:, None]
    same = evaluate_value(spec, pts, n_paths=20_000, seed=0, refine=False, richardson=False)
    bsol = solve_truncated(spec, [0.0], 8.0, 16, RegressionConfig(), 2, 20_000)
    res = identification_residual(spec, bsol, same)
    y_lim = max(0.02 * b.y_bound, 3 * bsol.y0_ci)
    z_lim = 0.05 * (1 + res["z_scale"])
    ok = res["y_sup"] <= y_lim and res["z_sup"] <= z_lim
    assert record("C7", ok, f"sup|Y-v|={res['y_sup']:.4f}<={y_lim:.4f}; "
                            f"sup|Z-g|={res['z_sup']:.4f}<={z_lim:.4f} "
                            f"(all paths: {res['y_sup_all']:.3f}, {res['z_sup_all']:.3f})")


# 8 -------------------------------------------------------------------------------


def test_c8_oracle_equivalence(oracle_values):
    spec = fixtures.ou_bounded_quadratic()
    ens = simulate(spec, TimeGrid(2.0, 64), 100_000, 8, [0.0])
    y0 = solve_backward(spec, ens).y0
    ref = oracle_values["bounded_quadratic_lattice_T2_N64"]["value"]
    tree_ok = abs(y0 - ref) <= 0.01 * abs(ref)
    hq = fixtures.hjb_quadratic()
    dense = fd_hjb_1d(hq)
    q = np.array([[-1.0], [0.0], [1.0]])
    field = evaluate_value(hq, q, n_paths=20_000)
    ref_v = dense(q[:, 0])
    gaps = np.abs(field.v - ref_v)
    fd_ok = bool(np.all(gaps <= np.maximum(0.01 * np.abs(ref_v), 3 * field.ci)))
    assert record("C8", tree_ok and fd_ok,
                  f"regression {y0:.5f} vs lattice {ref:.5f}; value field vs FD gaps "
                  + ", ".join(f"{g:.1e}" for g in gaps))


# 9 -------------------------------------------------------------------------------


def test_c9_fundamental_relation(lq_fields):
    ctrl, field = lq_fields[None]
    policy = synthesize_policy(ctrl, field)
    sources = [("policy", policy), ("u=0", np.zeros(1)), ("u=0.5", np.array([0.5])),
               ("u=-x/2", lambda x: -0.5 * x)]
    ok, details = True, []
    for name, src in sources:
        fr = fundamental_relation_check(ctrl, [0.0], src, field, 6.0, n_paths=4000, seed=3)
        total = fr.J + fr.terminal
        tol = fr.interp_tol + fr.tail_bound
        if name == "policy":
            good = abs(total - fr.v) <= 3 * fr.J_ci + tol
        else:
            good = total >= fr.v - 3 * fr.J_ci - fr.interp_tol
        good &= fr.min_integrand >= -1e-8
        ok &= good
        details.append(f"{name}: J={total:.4f} v={fr.v:.4f} min I={fr.min_integrand:.1e}")
    # the selection bound is a hard assertion inside the policy; reaching here means it held
    details.append(f"max |u|/(C_gamma(1+|z|))={policy.max_bound_ratio:.3f}")
    ok &= policy.max_bound_ratio <= 1.0
    assert record("C9", ok, "; ".join(details))


# 10 ------------------------------------------------------------------------------


def test_c10_closed_loop(lq_fields):
    ok, details = True, []
    for bound, (ctrl, field) in lq_fields.items():
        policy = synthesize_policy(ctrl, field)
        a = closed_loop_run(ctrl, policy, [0.0], 4.0, n_paths=4000, seed=5)
        b = closed_loop_run(ctrl, policy, [0.0], 8.0, n_paths=4000, seed=5)
        change = abs(b.admissibility - a.admissibility)
        good = a.finite and b.finite and change <= a.tail_bound
        ok &= good
        details.append(f"{ctrl.name}: A(4)={a.admissibility:.5f} A(8)={b.admissibility:.5f} "
                       f"change={change:.1e} <= tail {a.tail_bound:.2e}")
    assert record("C10", ok, "; ".join(details))


# 11 ------------------------------------------------------------------------------


def test_c11_determinism(tmp_path):
    cfg = {
        "version": 1, "mode": "solve",
        "problem": {"fixture": "ou_cosine",
                    "constants": {"C": 1, "alpha": 0.5, "lambda": 1, "K": 1, "M": 0}},
        "x0": [0.0], "paths": 5000, "seed": 17, "horizons": [2, 4, 6, 8],
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    exe = shutil.which("qbsde")
    cmd = [exe] if exe else [sys.executable, "-m", "qbsde.cli"]
    outs = []
    for threads in (1, 4):
        out = tmp_path / f"t{threads}"
        proc = subprocess.run(cmd + ["--config", str(path), "--out", str(out), "--threads", str(threads)],
                              capture_output=True, text=True)
        assert proc.returncode in (0, 1), proc.stderr
        outs.append((out / "report.json").read_bytes())
    same = outs[0] == outs[1]
    assert record("C11", same, f"report.json byte-identical for --threads 1 and 4 ({len(outs[0])} bytes)")
