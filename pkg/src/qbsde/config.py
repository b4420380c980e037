"""Run configuration: a versioned JSON document checked against a schema.

A minimal configuration::

    {
      "version": 1,
      "mode": "solve",
      "problem": {"fixture": "ou_cosine",
                  "constants": {"C": 1, "alpha": 0.5, "lambda": 1, "K": 1, "M": 0}},
      "x0": [0.0]
    }

``problem`` may be replaced by ``"problem_file": "path.json"`` holding the
same object, and control modes take a ``control`` object of the same shape
naming a control fixture.  The ``constants`` block is required: it is the
contract the run is checked against, and it replaces the fixture's own
constants.  Unknown keys are rejected at every level.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jsonschema

from .regression import RegressionConfig

__all__ = ["SCHEMA", "MODES", "ConfigError", "RunConfig", "load_config", "parse_config"]

MODES = ("validate", "simulate", "solve", "gradient", "value", "residuals",
         "policy", "cost", "verify-all")

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}

_CONSTANTS = {
    "type": "object",
    "properties": {"C": {"type": "number", "minimum": 0},
                   "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                   "lambda": _POS,
                   "K": {"type": "number", "minimum": 0},
                   "M": {"type": "number", "minimum": 0}},
    "required": ["C", "alpha", "lambda", "K", "M"],
    "additionalProperties": False,
}

_PROBLEM = {
    "type": "object",
    "properties": {"fixture": {"type": "string"},
                   "params": {"type": "object"},
                   "constants": _CONSTANTS},
    "required": ["fixture", "constants"],
    "additionalProperties": False,
}

_SOURCE = {
    "type": "object",
    "properties": {"name": {"type": "string"},
                   "constant": _VEC,
                   "gain": {"type": "array", "items": _VEC, "minItems": 1}},
    "required": ["name"],
    "oneOf": [{"required": ["constant"]}, {"required": ["gain"]}],
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "qbsde run configuration",
    "type": "object",
    "properties": {
        "version": {"const": 1},
        "mode": {"enum": list(MODES)},
        "problem": _PROBLEM,
        "problem_file": {"type": "string"},
        "control": {
            "type": "object",
            "properties": {**_PROBLEM["properties"],
                           "sources": {"type": "array", "items": _SOURCE}},
            "required": ["fixture", "constants"],
            "additionalProperties": False,
        },
        "x0": _VEC,
        "points": {"type": "array", "items": _VEC, "minItems": 2},
        "query": {"type": "array", "items": _VEC, "minItems": 1},
        "direction": _VEC,
        "delta": _POS,
        "grid": {
            "type": "object",
            "properties": {"steps_per_unit": _POS, "horizon": _POS},
            "additionalProperties": False,
        },
        "paths": {"type": "integer", "minimum": 2},
        "eps": _POS,
        "T": _POS,
        "refine": {"type": "boolean"},
        "richardson": {"type": "boolean"},
        "regression": {
            "type": "object",
            "properties": {"basis": {"enum": ["poly", "rbf"]},
                           "degree": {"type": "integer", "minimum": 0},
                           "width": _POS,
                           "ridge": {"type": "number", "minimum": 0},
                           "picard_max": {"type": "integer", "minimum": 1},
                           "picard_tol": _POS,
                           "z_max": _POS},
            "additionalProperties": False,
        },
        "horizons": {"type": "array", "items": _POS, "minItems": 2},
        "rate": {"enum": ["truncation", "zero_terminal"]},
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
    },
    "required": ["version", "mode", "x0"],
    "oneOf": [{"required": ["problem"]}, {"required": ["problem_file"]},
              {"required": ["control"], "not": {"anyOf": [{"required": ["problem"]},
                                                          {"required": ["problem_file"]}]}}],
    "additionalProperties": False,
}


class ConfigError(ValueError):
    """Schema violation or unusable configuration (CLI exit status 2)."""


def _message(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "oneOf" and not err.absolute_path:
        return "<root>: exactly one of 'problem', 'problem_file' or 'control' is required"
    return f"{where}: {err.message}"


def _validate(doc):
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), e.message))
    if errors:
        raise ConfigError("; ".join(_message(e) for e in errors))


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with defaults filled in (see module docstring)."""

    raw: dict
    base: Optional[Path] = None

    def get(self, key, default=None):
        return self.raw.get(key, default)

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def paths(self) -> int:
        return int(self.raw.get("paths", 20_000))

    @property
    def steps_per_unit(self) -> float:
        return float(self.raw.get("grid", {}).get("steps_per_unit", 16.0))

    @property
    def eps(self) -> float:
        return float(self.raw.get("eps", 0.01))

    @property
    def regression(self) -> RegressionConfig:
        return RegressionConfig(**self.raw.get("regression", {}))

    def problem_doc(self) -> Optional[dict]:
        if "problem" in self.raw:
            return self.raw["problem"]
        if "problem_file" in self.raw:
            path = Path(self.raw["problem_file"])
            if not path.is_absolute() and self.base is not None:
                path = self.base / path
            try:
                doc = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"problem_file: cannot read {path}: {exc}") from None
            sub = jsonschema.Draft202012Validator(_PROBLEM)
            errs = list(sub.iter_errors(doc))
            if errs:
                raise ConfigError("; ".join(f"problem_file: {_message(e)}" for e in errs))
            return doc
        return None

    def echo(self) -> dict:
        """The configuration as run, for the report (the output location is left out)."""
        doc = copy.deepcopy(self.raw)
        doc.pop("output", None)
        return doc


def parse_config(doc: dict, base=None, overrides: Optional[dict] = None) -> RunConfig:
    """Validate ``doc`` (after applying ``overrides``) and wrap it."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>: configuration must be a JSON object")
    doc = copy.deepcopy(doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    _validate(doc)
    cfg = RunConfig(doc, None if base is None else Path(base))
    try:
        cfg.regression
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"regression: {exc}") from None
    return cfg


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(doc, base=path.parent, overrides=overrides)
