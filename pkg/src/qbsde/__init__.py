"""Quadratic BSDEs on random and infinite horizons, with a forward SDE."""

__version__ = "0.1.0"

from .model import (Ball, BoundSet, Box, Constants, ProblemSpec, WholeSpace, monotonicity_margin,
                    theoretical_bounds, validate_assumptions)
from .regression import RegressionConfig
from .forward import TimeGrid, first_exit, simulate, simulate_controlled, simulate_variational
from .bsde import solve_backward, solve_linear_backward
from .horizon import cauchy_table, required_horizon, solve_random_horizon, solve_truncated
from .gradient import gradient_fd, gradient_pipeline, solve_gradient_bsde
from .mild import ValueField, evaluate_value, identification_residual, mild_residual
from .control import (ControlSpec, closed_loop_run, cost_estimate, fundamental_relation_check,
                      hamiltonian_argmin, hamiltonian_problem, synthesize_policy)
from .oracle import exit_value_1d, fd_hjb_1d, quadrature_value_1d, tree_solve
from .fixtures import build_control, build_fixture
