import csv
import json
from pathlib import Path

import pytest

from qbsde.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def small(tmp_path, name="run.json", **kw):
    doc = {
        "version": 1, "mode": "solve",
        "problem": {"fixture": "ou_cosine",
                    "constants": {"C": 1, "alpha": 0.5, "lambda": 1, "K": 1, "M": 0}},
        "x0": [0.0], "paths": 1000, "grid": {"steps_per_unit": 8}, "seed": 3,
    }
    doc.update(kw)
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_bad_config_exit_2(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["--config", str(CONFIGS / "bad_missing_lambda.json"), "--out", str(out)]) == 2
    assert "lambda" in capsys.readouterr().err
    bad_fixture = small(tmp_path, problem={"fixture": "nope", "constants": {
        "C": 1, "alpha": 0.5, "lambda": 1, "K": 1, "M": 0}})
    assert main(["--config", str(bad_fixture), "--out", str(out)]) == 2


def test_validate_mode(tmp_path):
    out = tmp_path / "o"
    assert main(["validate", "--config", str(small(tmp_path)), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["passed"] and rep["mode"] == "validate" and len(rep["checks"]) >= 2
    assert {"name", "anchor", "measured", "bound", "ci", "pass"} == set(rep["checks"][0])
    assert "output" not in rep["config"]


def test_trivial_verify_all_passes(tmp_path):
    out = tmp_path / "o"
    assert main(["--config", str(CONFIGS / "trivial_verify.json"), "--out", str(out)]) == 0


def test_report_independent_of_threads(tmp_path):
    cfg = str(small(tmp_path))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", cfg, "--out", str(a), "--threads", "1"]) == 0
    assert main(["--config", cfg, "--out", str(b), "--threads", "3"]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_cauchy_table_files(tmp_path):
    out = tmp_path / "o"
    cfg = small(tmp_path, horizons=[2, 4, 6, 8])
    main(["--config", str(cfg), "--out", str(out)])
    with open(out / "cauchy.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["n", "m", "gap", "bound", "ci"]
    assert len(rows) == 1 + 6
