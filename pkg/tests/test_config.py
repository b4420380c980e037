import json

import pytest

from qbsde.config import ConfigError, load_config, parse_config

BASE = {
    "version": 1,
    "mode": "solve",
    "problem": {"fixture": "ou_cosine",
                "constants": {"C": 1, "alpha": 0.5, "lambda": 1, "K": 1, "M": 0}},
    "x0": [0.0],
}


def with_(**kw):
    doc = json.loads(json.dumps(BASE))
    doc.update(kw)
    return doc


def test_defaults():
    cfg = parse_config(BASE)
    assert (cfg.seed, cfg.paths, cfg.steps_per_unit, cfg.eps) == (0, 20_000, 16.0, 0.01)
    assert cfg.problem_doc()["fixture"] == "ou_cosine"


def test_missing_lambda_names_the_key():
    doc = with_()
    del doc["problem"]["constants"]["lambda"]
    with pytest.raises(ConfigError, match="problem/constants: 'lambda' is a required property"):
        parse_config(doc)


@pytest.mark.parametrize("bad", [
    {"horizons": []},
    {"horizons": [2.0]},
    {"typo": 1},
    {"version": 2},
    {"mode": "explode"},
    {"paths": 1},
    {"regression": {"basis": "spline"}},
])
def test_schema_rejections(bad):
    with pytest.raises(ConfigError):
        parse_config(with_(**bad))


def test_exactly_one_problem_source():
    doc = with_(problem_file="p.json")
    with pytest.raises(ConfigError, match="exactly one"):
        parse_config(doc)
    doc = with_()
    del doc["problem"]
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_problem_file_relative_to_config(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps(BASE["problem"]))
    doc = with_(problem_file="p.json")
    del doc["problem"]
    (tmp_path / "run.json").write_text(json.dumps(doc))
    cfg = load_config(tmp_path / "run.json", overrides={"seed": 4, "paths": None})
    assert cfg.problem_doc() == BASE["problem"] and cfg.seed == 4
    (tmp_path / "p.json").write_text(json.dumps({"fixture": "ou_cosine"}))
    with pytest.raises(ConfigError, match="problem_file"):
        load_config(tmp_path / "run.json").problem_doc()


def test_echo_drops_output_and_bad_json(tmp_path):
    assert "output" not in parse_config(with_(output="x")).echo()
    p = tmp_path / "broken.json"
    p.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)
