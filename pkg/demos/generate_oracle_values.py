"""Recompute the deterministic reference values frozen in tests/data/oracle_values.csv.

Every number here comes from a deterministic solver that shares no code with
the Monte Carlo pipeline (quadrature, lattice backward induction, Newton on a
finite-difference mesh, a boundary-value collocation).  Run from the
repository root::

    python3 demos/generate_oracle_values.py
"""

import math
from pathlib import Path

import numpy as np

from qbsde import fixtures
from qbsde.io import spec_fingerprint, write_fixture_csv
from qbsde.oracle import exit_value_1d, fd_hjb_1d, quadrature_value_1d, tree_solve

OUT = Path(__file__).resolve().parents[1] / "tests" / "data" / "oracle_values.csv"


def main():
    rows, meta = [], {}
    cos = fixtures.ou_cosine()
    q = quadrature_value_1d(cos, 0.0, 8.0, tol=1e-12)
    rows.append({"name": "cosine_quadrature_T8_x0", "value": q, "tolerance": 1e-10})
    q40 = quadrature_value_1d(cos, 0.0, 40.0, tol=1e-12)
    rows.append({"name": "cosine_quadrature_T40_x0", "value": q40, "tolerance": 1e-10})
    meta["cosine_quadrature"] = {"fingerprint": spec_fingerprint(cos), "tol": 1e-12}

    bq = fixtures.ou_bounded_quadratic()
    lat5 = tree_solve(bq, 2.0, 64, q=5, method="lattice")
    lat7 = tree_solve(bq, 2.0, 64, q=7, method="lattice")
    rows.append({"name": "bounded_quadratic_lattice_T2_N64", "value": lat5.y0, "tolerance": 1e-8})
    rows.append({"name": "bounded_quadratic_lattice_q7_gap", "value": abs(lat5.y0 - lat7.y0),
                 "tolerance": 1e-4})
    tree8 = tree_solve(bq, 2.0, 8, q=5, method="tree")
    rows.append({"name": "bounded_quadratic_tree_T2_N8", "value": tree8.y0, "tolerance": 1e-8})
    meta["bounded_quadratic"] = {"fingerprint": spec_fingerprint(bq), "lattice_points": 801,
                                 "steps": 64, "q": [5, 7]}

    hq = fixtures.hjb_quadratic()
    dense = fd_hjb_1d(hq)
    rows.append({"name": "hjb_quadratic_fd_v0", "value": float(dense(np.array([0.0]))[0]),
                 "tolerance": 1e-5})
    meta["hjb_quadratic"] = {"fingerprint": spec_fingerprint(hq), "meshes": dense.meshes}

    ex = fixtures.exit_laplace()
    rows.append({"name": "exit_laplace_x0", "value": exit_value_1d(ex, 0.0), "tolerance": 1e-7})
    rows.append({"name": "exit_laplace_closed_form", "value": math.exp(-1.0), "tolerance": 0.0})
    meta["exit_laplace"] = {"fingerprint": spec_fingerprint(ex)}

    write_fixture_csv(OUT, rows, ["name", "value", "tolerance"], meta)
    for r in rows:
        print(f"{r['name']:40s} {r['value']:.12g}")


if __name__ == "__main__":
    main()
