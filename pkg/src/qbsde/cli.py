"""Command-line runner: ``qbsde MODE --config run.json [--seed N] [--out DIR] ...``.

Every mode writes ``report.json`` (check rows, environment, configuration
echo) plus mode-specific CSV files to the output directory.  Exit status:

* 0 when every check passes,
* 1 when the run completed but some check failed,
* 2 on a configuration error (schema violation, unknown fixture, ...),
* 3 on a numerical failure, with the failing stage named on stderr.

``--threads`` only changes how the noise is generated in parallel; the
numbers, and hence the report bytes, do not depend on it.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bsde import PicardError
from .config import MODES, ConfigError, RunConfig, load_config
from .control import (SelectionBoundError, closed_loop_run, cost_estimate, fundamental_relation_check,
                      hamiltonian_fd_check, hamiltonian_problem, synthesize_policy)
from .fixtures import build_control, build_fixture
from .forward import PolicyError, TimeGrid, simulate, simulate_variational
from .gradient import gradient_bound_check, gradient_fd, gradient_pipeline
from .horizon import HorizonWarning, cauchy_table, solve_random_horizon, solve_truncated
from .io import spec_fingerprint, write_cauchy, write_csv, write_ensemble, write_report
from .mild import CoverageError, evaluate_value, identification_residual, mild_residual
from .model import Constants, monotonicity_margin, theoretical_bounds, validate_assumptions
from .oracle import NewtonDivergence
from .regression import RankDeficiencyError

__all__ = ["main", "run", "NumericalFailure"]

NUMERICAL = (PicardError, PolicyError, CoverageError, NewtonDivergence, RankDeficiencyError,
             SelectionBoundError, FloatingPointError, np.linalg.LinAlgError)


class NumericalFailure(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {type(exc).__name__}: {exc}")
        self.stage = stage


def _row(name, anchor, measured, bound, ci=0.0, passed=None):
    """One check record; one-sided checks pass when ``measured <= bound + 3 ci``."""
    measured, bound, ci = float(measured), float(bound), float(ci)
    if passed is None:
        passed = bool(np.isfinite(measured) and measured <= bound + 3.0 * ci)
    return {"name": name, "anchor": anchor, "measured": measured, "bound": bound,
            "ci": ci, "pass": bool(passed)}


def _constants(doc) -> Constants:
    c = doc["constants"]
    return Constants(C=float(c["C"]), alpha=float(c["alpha"]), lam=float(c["lambda"]),
                     K=float(c["K"]), M=float(c["M"]))


class Run:
    """State shared by the mode handlers of one invocation."""

    def __init__(self, cfg: RunConfig, out: Path, threads: int = 1):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.rows = []
        self.artifacts = []
        self.extra = {}
        self.ctrl = None
        try:
            cdoc = cfg.get("control")
            if cdoc is not None:
                ctrl = build_control(cdoc["fixture"], **cdoc.get("params", {}))
                self.ctrl = dataclasses.replace(ctrl, constants=_constants(cdoc))
                self.spec = hamiltonian_problem(self.ctrl)
            else:
                pdoc = cfg.problem_doc()
                spec = build_fixture(pdoc["fixture"], **pdoc.get("params", {}))
                self.spec = dataclasses.replace(spec, constants=_constants(pdoc))
            self.spec.constants.check()
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"problem: {exc}") from None
        self.x0 = np.asarray(cfg.get("x0"), dtype=float)
        if self.x0.size != self.spec.state_dim:
            raise ConfigError(f"x0: expected {self.spec.state_dim} coordinates, got {self.x0.size}")
        self.bounds = theoretical_bounds(self.spec)
        self.lam = self.spec.constants.lam
        self._field = None

    # -- helpers --------------------------------------------------------------------

    def add(self, *rows):
        self.rows.extend(rows)

    def stage(self, name, fn, *a, **kw):
        try:
            return fn(*a, **kw)
        except NUMERICAL as exc:
            raise NumericalFailure(name, exc) from exc

    def write(self, name, rows, columns=None):
        self.artifacts.append(write_csv(self.out / name, rows, columns).name)

    @property
    def points(self):
        pts = self.cfg.get("points")
        if pts is not None:
            pts = np.asarray(pts, dtype=float)
            if pts.shape[1] != self.spec.state_dim:
                raise ConfigError("points: wrong number of coordinates")
            return pts
        if self.spec.state_dim != 1:
            raise ConfigError("points: required when the state dimension exceeds 1")
        if self.spec.has_exit:
            lo, hi = self.spec.stopping.lower[0], self.spec.stopping.upper[0]
            return np.linspace(lo, hi, 11)[1:-1, None]
        return self.x0[0] + np.linspace(-3.0, 3.0, 9)[:, None]

    @property
    def query(self):
        q = self.cfg.get("query")
        if q is not None:
            return np.asarray(q, dtype=float)
        if self.spec.state_dim == 1:
            return self.x0[0] + np.array([[-1.0], [0.0], [1.0]])
        return self.x0[None]

    def field(self, refine=None, richardson=None):
        """Value field on the configured points (cached for the run)."""
        if self._field is None:
            cfg = self.cfg
            self._field = self.stage(
                "value field", evaluate_value, self.spec, self.points, eps=cfg.eps,
                reg=cfg.regression, seed=cfg.seed, n_paths=cfg.paths,
                steps_per_unit=cfg.steps_per_unit,
                refine=cfg.get("refine", True) if refine is None else refine,
                richardson=cfg.get("richardson", True) if richardson is None else richardson,
                threads=self.threads)
            self.write("value.csv", self._field.to_rows())
        return self._field

    def sources(self):
        out = []
        for s in self.cfg.get("control", {}).get("sources", []):
            if "constant" in s:
                out.append((s["name"], np.asarray(s["constant"], dtype=float)))
            else:
                G = np.asarray(s["gain"], dtype=float)
                out.append((s["name"], lambda x, G=G: x @ G.T))
        return out

    # -- modes ----------------------------------------------------------------------

    def validate(self):
        if self.ctrl is not None:
            for name, worst in self.ctrl.check_invariants(seed=self.cfg.seed).items():
                self.add(_row(f"control {name}", "standing control assumptions", worst, 1e-12))
            self.add(_row("envelope dF/dz vs finite difference", "Hamiltonian envelope derivative",
                          hamiltonian_fd_check(self.ctrl, seed=self.cfg.seed), 1e-5))
            return
        rep = validate_assumptions(self.spec, seed=self.cfg.seed)
        for c in rep.checks:
            self.add(_row(f"assumption {c.name}", "generator and terminal assumptions",
                          c.worst_violation, rep.tolerance))
        self.write("assumptions.csv", rep.to_rows())
        self.add(_row("monotonicity margin", "lambda-monotonicity in y",
                      monotonicity_margin(self.spec, seed=self.cfg.seed), -self.lam + 1e-12))

    def simulate(self):
        cfg = self.cfg
        T = float(cfg.get("grid", {}).get("horizon", cfg.get("T", 8.0 / self.lam)))
        grid = TimeGrid.with_density(T, cfg.steps_per_unit)
        ens = self.stage("simulate", simulate, self.spec, grid, cfg.paths, cfg.seed, self.x0,
                         threads=self.threads)
        self.artifacts.append(write_ensemble(self.out, ens).name)
        self.add(_row("non-finite paths", "forward state well posed", float(ens.flagged), 0.0))
        h = np.asarray(cfg.get("direction", np.eye(self.spec.state_dim)[0]), dtype=float)
        var = simulate_variational(self.spec, ens, h)
        ratio = float(np.max(np.linalg.norm(var.D, axis=-1)) / np.linalg.norm(h))
        self.add(_row("sup |grad_x X h| / |h|", "variational process contraction",
                      ratio, 1.0 + 10.0 * grid.dt))
        self.extra["simulate"] = {"horizon": T, "n_steps": grid.n_steps,
                                  "mean_final": ens.X[:, -1].mean(axis=0)}

    def solve(self):
        cfg = self.cfg
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", HorizonWarning)
            sol = self.stage("solve", solve_random_horizon, self.spec, self.x0, cfg.eps,
                             steps_per_unit=cfg.steps_per_unit, reg=cfg.regression, seed=cfg.seed,
                             n_paths=cfg.paths, refine=cfg.get("refine", True),
                             richardson=cfg.get("richardson", False), threads=self.threads)
        self.add(_row("|Y_0|", "a priori bound M + K/lambda", abs(sol.y0), self.bounds.y_bound, sol.ci),
                 _row("clamp activations per path-step", "a priori bound M + K/lambda",
                      sol.clamp_fraction, 1e-3))
        self.extra["solve"] = {"y0": sol.y0, "ci": sol.ci, "horizon": sol.n_used,
                               "steps_per_unit": sol.steps_per_unit, "records": sol.records,
                               "discretisation_gap": sol.discretisation_gap}
        self.write("solve_records.csv", sol.records)
        hz = cfg.get("horizons")
        if hz is not None:
            tab = self.stage("cauchy table", cauchy_table, self.spec, self.x0, hz, reg=cfg.regression,
                             seed=cfg.seed, n_paths=cfg.paths, steps_per_unit=cfg.steps_per_unit,
                             rate=cfg.get("rate", "truncation"), threads=self.threads)
            anchor = ("zero-terminal truncation rate (K/lambda) e^{-lambda n}"
                      if cfg.get("rate") == "zero_terminal" else "truncation rate beta e^{-lambda n}")
            for r, t in zip(tab.rows, tab.tol_disc):
                self.add(_row(f"gap n={r['n']:g} m={r['m']:g}", anchor, r["gap"], r["bound"] + t, r["ci"]))
            if tab.slope is not None:
                self.add(_row("fitted decay slope", anchor, tab.slope, -0.75 * self.lam))
            self.artifacts.extend(p.name for p in write_cauchy(self.out, tab))

    def gradient(self):
        if self.spec.has_exit:
            raise ConfigError("gradient: not available for problems with an exit domain")
        cfg = self.cfg
        T = float(cfg.get("T", 6.0 / self.lam))
        h = np.asarray(cfg.get("direction", np.eye(self.spec.state_dim)[0]), dtype=float)
        gsol, bsol, var = self.stage("gradient", gradient_pipeline, self.spec, self.x0, h, T,
                                     steps_per_unit=cfg.steps_per_unit, reg=cfg.regression,
                                     seed=cfg.seed, n_paths=cfg.paths, threads=self.threads)
        fd = self.stage("finite difference", gradient_fd, self.spec, self.x0, h,
                        float(cfg.get("delta", 0.05)), T, steps_per_unit=cfg.steps_per_unit,
                        reg=cfg.regression, seed=cfg.seed, n_paths=cfg.paths, threads=self.threads)
        diff = abs(gsol.u0 - fd.value)
        tol = max(1e-2 * abs(gsol.u0), 3.0 * math.hypot(gsol.ci, fd.ci))
        hn = float(np.linalg.norm(h))
        self.add(_row("|U_0 - finite difference|", "gradient representation", diff, tol,
                      passed=diff <= tol),
                 _row("sup |U|", "gradient bound (C/lambda)|h|",
                      self.bounds.gradient_bound * hn - gradient_bound_check(gsol, self.bounds),
                      self.bounds.gradient_bound * hn + 1e-3 * hn),
                 _row("sup |grad_x X h| / |h|", "variational process contraction",
                      float(np.max(np.linalg.norm(var.D, axis=-1))) / hn,
                      1.0 + 10.0 * bsol.grid.dt))
        self.extra["gradient"] = {"U0": gsol.u0, "ci": gsol.ci, "fd": fd.value, "fd_ci": fd.ci}

    def value(self):
        f = self.field()
        self.add(_row("failed points", "value function evaluation", len(f.failures), 0))
        ok = f.ok
        self.add(_row("max |v|", "a priori bound M + K/lambda", float(np.max(np.abs(f.v[ok]))),
                      self.bounds.y_bound, float(np.max(f.ci[ok]))))
        self.extra["value"] = {"delta_v": f.delta_v, "delta_g": f.delta_g,
                               "failures": {str(k): v for k, v in f.failures.items()}}

    def residuals(self):
        cfg = self.cfg
        f = self.field()
        T = float(cfg.get("T", 1.0))
        res_rows = []
        for j, q in enumerate(self.query):
            r = self.stage("mild residual", mild_residual, self.spec, q, T, f,
                           mc_paths=cfg.paths, seed=cfg.seed + 1)
            self.add(_row(f"mild residual at x={q.tolist()}", "mild fixed-point identity",
                          abs(r.residual), r.interp_tol, r.ci))
            res_rows.append({"point": j, "residual": r.residual, "ci": r.ci, "interp_tol": r.interp_tol})
        self.write("mild_residuals.csv", res_rows)
        if self.spec.has_exit:
            return
        horizon = float(cfg.get("grid", {}).get("horizon", 8.0 / self.lam))
        same = self.stage("value field (same step)", evaluate_value, self.spec, self.points,
                          eps=cfg.eps, reg=cfg.regression, seed=cfg.seed, n_paths=cfg.paths,
                          steps_per_unit=cfg.steps_per_unit, refine=False, richardson=False,
                          threads=self.threads)
        bsol = self.stage("solve", solve_truncated, self.spec, self.x0, horizon,
                          cfg.steps_per_unit, cfg.regression, cfg.seed + 2, cfg.paths, self.threads)
        ident = self.stage("identification", identification_residual, self.spec, bsol, same)
        self.add(_row("sup |Y - v(X)|", "identification Y = v(X)", ident["y_sup"],
                      max(0.02 * self.bounds.y_bound, 3.0 * bsol.y0_ci)),
                 _row("sup |Z - grad v(X) sigma|", "identification Z = grad v(X) sigma",
                      ident["z_sup"], 0.05 * (1.0 + ident["z_scale"])))
        self.extra["identification"] = {k: v for k, v in ident.items() if k != "per_step"}

    def _need_control(self, mode):
        if self.ctrl is None:
            raise ConfigError(f"{mode}: requires a 'control' block")

    def policy(self):
        self._need_control("policy")
        cfg = self.cfg
        f = self.field()
        pol = synthesize_policy(self.ctrl, f)
        T = float(cfg.get("T", 6.0 / self.lam))
        fr = self.stage("fundamental relation", fundamental_relation_check, self.ctrl, self.x0, pol, f,
                        T, n_paths=cfg.paths, seed=cfg.seed + 3, steps_per_unit=cfg.steps_per_unit,
                        threads=self.threads)
        self.add(_row("|J_T + e^{-lam T} v(X_T) - v(x)| (policy)", "fundamental relation, optimal feedback",
                      abs(fr.residual), fr.interp_tol, fr.residual_ci),
                 _row("-min integrand", "fundamental relation, nonnegative gap", -fr.min_integrand, 1e-8))
        loops = []
        for TT in (T, 2.0 * T):
            loops.append(self.stage("closed loop", closed_loop_run, self.ctrl, pol, self.x0, TT,
                                    n_paths=cfg.paths, seed=cfg.seed + 4,
                                    steps_per_unit=cfg.steps_per_unit, threads=self.threads))
        change = abs(loops[1].admissibility - loops[0].admissibility)
        self.add(_row("admissibility change under horizon doubling", "closed-loop admissibility",
                      change, loops[0].tail_bound, passed=loops[1].finite and change <= loops[0].tail_bound),
                 _row("max |gamma| / (C_gamma (1 + |z|))", "selection growth bound",
                      pol.max_bound_ratio, 1.0))
        grid = f.points if self.spec.state_dim > 1 else np.linspace(f.lower[0], f.upper[0], 41)[:, None]
        self.write("policy.csv", pol.table(grid))
        self.extra["policy"] = {"J": fr.J, "J_ci": fr.J_ci, "v": fr.v,
                                "admissibility": [lp.admissibility for lp in loops],
                                "converged_fraction": pol.converged_fraction}

    def cost(self):
        self._need_control("cost")
        cfg = self.cfg
        f = self.field()
        T = float(cfg.get("T", 6.0 / self.lam))
        rows = []
        for name, src in self.sources():
            fr = self.stage(f"cost {name}", fundamental_relation_check, self.ctrl, self.x0, src, f, T,
                            n_paths=cfg.paths, seed=cfg.seed + 3, steps_per_unit=cfg.steps_per_unit,
                            threads=self.threads)
            ce = self.stage(f"cost {name}", cost_estimate, self.ctrl, self.x0, src, T,
                            n_paths=cfg.paths, seed=cfg.seed + 3, steps_per_unit=cfg.steps_per_unit,
                            threads=self.threads)
            lhs = fr.J + fr.terminal
            self.add(_row(f"v(x) - (J_T + e^{{-lam T}} v(X_T)), {name}", "suboptimal controls cost more",
                          fr.v - lhs, fr.interp_tol, fr.J_ci),
                     _row(f"-min integrand, {name}", "fundamental relation, nonnegative gap",
                          -fr.min_integrand, 1e-8))
            rows.append({"source": name, "J": ce.J, "ci": ce.ci, "tail_bound": ce.tail_bound,
                         "v": fr.v, "admissibility": ce.admissibility})
        self.write("costs.csv", rows, ["source", "J", "ci", "tail_bound", "v", "admissibility"])

    def verify_all(self):
        self.validate()
        self.solve()
        if self.ctrl is not None:
            self.policy()
            if self.cfg.get("control", {}).get("sources"):
                self.cost()
            return
        if not self.spec.has_exit:
            self.gradient()
        self.residuals()

    def dispatch(self):
        handler = {"verify-all": self.verify_all}.get(self.cfg.mode) or getattr(self, self.cfg.mode)
        handler()

    def report(self):
        return {
            "tool": "qbsde",
            "version": __version__,
            "mode": self.cfg.mode,
            "problem": getattr(self.spec, "name", "problem"),
            "fingerprint": spec_fingerprint(self.spec),
            "bounds": dataclasses.asdict(self.bounds),
            "checks": self.rows,
            "passed": all(r["pass"] for r in self.rows),
            "details": self.extra,
            "artifacts": sorted(set(self.artifacts)),
            "environment": {"python": platform.python_version(), "numpy": np.__version__,
                            "scipy": scipy.__version__, "platform": platform.system()},
            "config": self.cfg.echo(),
        }


def run(cfg: RunConfig, out=None, threads: int = 1) -> dict:
    """Execute ``cfg`` and write ``report.json`` plus CSV artifacts to ``out``."""
    out = Path(out if out is not None else cfg.get("output", "qbsde-out"))
    out.mkdir(parents=True, exist_ok=True)
    r = Run(cfg, out, threads)
    r.dispatch()
    rep = r.report()
    write_report(out / "report.json", rep)
    return rep


def build_parser():
    p = argparse.ArgumentParser(prog="qbsde", description=__doc__.splitlines()[0])
    p.add_argument("mode", choices=MODES, nargs="?",
                   help="mode to run (defaults to the config's 'mode')")
    p.add_argument("--config", required=True, help="path to the JSON run configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (default: config 'output' or ./qbsde-out)")
    p.add_argument("--paths", type=int, help="override the number of Monte Carlo paths")
    p.add_argument("--threads", type=int, default=1, help="noise-generation threads; results do not change")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides={"mode": args.mode, "seed": args.seed,
                                                  "paths": args.paths, "output": args.out})
        rep = run(cfg, args.out, max(1, args.threads))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure in {exc}", file=sys.stderr)
        return 3
    failed = [r["name"] for r in rep["checks"] if not r["pass"]]
    for r in rep["checks"]:
        print(f"{'PASS' if r['pass'] else 'FAIL'}  {r['name']}: {r['measured']:.6g} "
              f"(bound {r['bound']:.6g}, ci {r['ci']:.3g})")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
