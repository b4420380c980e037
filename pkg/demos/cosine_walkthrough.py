"""From a generator to a value function, on the Ornstein-Uhlenbeck cosine problem.

The generator is ``F(x, y, z) = -y + cos(x)`` with ``dX = -X dt + dW``.  Its
infinite-horizon solution is ``v(x) = int_0^inf e^{-s} E cos(X_s^x) ds``,
which the quadrature oracle evaluates to ten digits, so every Monte Carlo
number printed below has an independent reference next to it.

    python3 demos/cosine_walkthrough.py        # about a minute
"""

import numpy as np

from qbsde import fixtures
from qbsde.gradient import gradient_fd, gradient_pipeline
from qbsde.horizon import cauchy_table, solve_random_horizon
from qbsde.mild import evaluate_value, mild_residual
from qbsde.model import theoretical_bounds, validate_assumptions
from qbsde.oracle import quadrature_value_1d

spec = fixtures.ou_cosine()
bounds = theoretical_bounds(spec)
print(f"bounds: |Y| <= {bounds.y_bound:.3f}, truncation constant {bounds.beta:.3f}, "
      f"|grad v| <= {bounds.gradient_bound:.3f}")
print("assumptions audited:", all(c.passed for c in validate_assumptions(spec).checks))

# Truncating the horizon at n costs at most beta e^{-lambda n}.
tab = cauchy_table(spec, [0.0], [2, 4, 6, 8], n_paths=20_000)
for r in tab.rows:
    print(f"  gap({r['n']:g},{r['m']:g}) = {r['gap']:.2e}   bound {r['bound']:.2e}")
print(f"fitted decay slope {tab.slope:.2f} (rate lambda = 1)")

# Horizon picked from eps, step refined until stable, then extrapolated in dt.
sol = solve_random_horizon(spec, [0.0], eps=0.01, richardson=True)
ref = quadrature_value_1d(spec, 0.0, 40.0, tol=1e-10)
print(f"v(0): Monte Carlo {sol.y0:.4f} +- {sol.ci:.1e}   quadrature {ref:.6f}")

# The derivative equation against a common-random-number finite difference.
g, _, _ = gradient_pipeline(spec, [0.5], [1.0], 6.0, n_paths=20_000)
fd = gradient_fd(spec, [0.5], [1.0], 0.01, 6.0, n_paths=20_000)
print(f"v'(0.5): derivative BSDE {g.u0:.5f}   finite difference {fd.value:.5f}")

# A value field on a grid and the mild identity it must satisfy over [0, 1].
field = evaluate_value(spec, np.linspace(-3.5, 3.5, 9)[:, None], n_paths=10_000)
for x in (-1.0, 0.0, 1.0):
    r = mild_residual(spec, [x], 1.0, field, mc_paths=20_000)
    print(f"  mild residual at {x:+.0f}: {r.residual:+.1e} (ci {r.ci:.1e}, interpolation {r.interp_tol:.1e})")
