import numpy as np
import pytest

from qbsde.io import read_fixture_csv
from qbsde.model import Constants, ProblemSpec

from pathlib import Path

DATA = Path(__file__).parent / "data"


def make_spec(F, Fx=None, Fy=None, Fz=None, lam=1.0, C=1.0, K=1.0, M=0.0, alpha=0.5,
              a=-1.0, sigma=1.0, **kw):
    """Scalar OU problem with generator ``F``; missing partials default to zero."""
    zeros_x = lambda x, y, z: np.zeros_like(x)
    return ProblemSpec(
        np.array([[a]]), np.array([[sigma]]),
        generator=F,
        generator_dx=Fx or zeros_x,
        generator_dy=Fy or (lambda x, y, z: np.full_like(y, -lam)),
        generator_dz=Fz or (lambda x, y, z: np.zeros_like(z)),
        constants=Constants(C=C, alpha=alpha, lam=lam, K=K, M=M),
        **kw,
    )


@pytest.fixture(scope="session")
def oracle_values():
    meta, rows = read_fixture_csv(DATA / "oracle_values.csv")
    return {r["name"]: r for r in rows}


ACCEPTANCE = {}


def record(criterion, passed, detail=""):
    """Store one acceptance verdict and print it; the summary is repeated at the end of the run."""
    line = f"{criterion}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
