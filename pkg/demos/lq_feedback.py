"""Optimal feedback for ``g(x, u) = u^2 + 1 + cos(x)`` with the control in the noise channel.

The Hamiltonian ``inf_u {u^2 + z u} = -z^2/4`` is computed numerically by the
vectorised argmin, the value field is solved from that generator, and the
policy ``u(x) = -v'(x)/2`` is read off the field.  The fundamental relation
then says that the policy's cost equals ``v(0)`` and every other control
pays a nonnegative premium; the finite-difference HJB solver gives ``v(0)``
independently.

    python3 demos/lq_feedback.py        # about a minute
"""

import numpy as np

from qbsde import fixtures
from qbsde.control import (closed_loop_run, fundamental_relation_check, hamiltonian_problem,
                           synthesize_policy)
from qbsde.mild import evaluate_value
from qbsde.oracle import fd_hjb_1d

ctrl = fixtures.lq_control()
spec = hamiltonian_problem(ctrl)
field = evaluate_value(spec, np.linspace(-3, 3, 9)[:, None], n_paths=4000, refine=False)
print(f"v(0): value field {field.value([[0.0]])[0]:.4f}   "
      f"finite differences {fd_hjb_1d(fixtures.hjb_quadratic())(np.array([0.0]))[0]:.4f}")

policy = synthesize_policy(ctrl, field)
for row in policy.table(np.linspace(-2, 2, 5)):
    print(f"  u({row['x0']:+.1f}) = {row['u0']:+.4f}")

controls = [("feedback", policy), ("u = 0", np.zeros(1)), ("u = 0.5", np.array([0.5])),
            ("u = -x/2", lambda x: -0.5 * x)]
for name, src in controls:
    fr = fundamental_relation_check(ctrl, [0.0], src, field, 6.0, n_paths=4000, seed=3)
    print(f"  {name:9s} cost {fr.J + fr.terminal:.4f} +- {fr.J_ci:.1e}   "
          f"premium {fr.correction_integral:.4f}")

for T in (4.0, 8.0):
    cl = closed_loop_run(ctrl, policy, [0.0], T, n_paths=4000, seed=5)
    print(f"closed loop to T={T:g}: E int e^(-t)|u|^2 = {cl.admissibility:.5f} (tail <= {cl.tail_bound:.2e})")
