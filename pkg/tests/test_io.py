import json

import numpy as np
import pytest

from qbsde import fixtures
from qbsde.io import jsonable, read_fixture_csv, spec_fingerprint, write_csv, write_fixture_csv, write_report


def test_fixture_csv_roundtrip(tmp_path):
    rows = [{"name": "a", "value": 0.1 + 0.2}, {"name": "b", "value": 1e-17}]
    p = write_fixture_csv(tmp_path / "f.csv", rows, ["name", "value"], {"hash": "abc", "n": [1, 2]})
    meta, back = read_fixture_csv(p)
    assert meta == {"format_version": 1, "hash": "abc", "n": [1, 2]}
    assert back == rows


def test_report_is_strict_json(tmp_path):
    p = write_report(tmp_path / "r.json", {"a": np.float64(1.5), "b": np.arange(3), "c": (1, 2)})
    assert json.loads(p.read_text()) == {"a": 1.5, "b": [0, 1, 2], "c": [1, 2]}
    bad = write_report(tmp_path / "nan.json", {"x": float("nan"), "y": np.inf})
    assert json.loads(bad.read_text()) == {"x": None, "y": None}


def test_csv_columns(tmp_path):
    p = write_csv(tmp_path / "c.csv", [{"x": 1, "y": 2.5}], ["y", "x"])
    assert p.read_text().splitlines() == ["y,x", "2.5,1"]


def test_fingerprint_sensitivity():
    a = spec_fingerprint(fixtures.ou_cosine())
    assert a == spec_fingerprint(fixtures.ou_cosine())
    assert a != spec_fingerprint(fixtures.ou_cosine(amplitude=0.9))
    assert a != spec_fingerprint(fixtures.ou_cosine(a=-2.0))
    assert jsonable({"k": np.bool_(True)}) == {"k": True}
