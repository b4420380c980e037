"""Deterministic writers for reports and tabular artifacts."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

__all__ = [
    "write_csv",
    "write_cauchy",
    "write_report",
    "write_ensemble",
    "write_fixture_csv",
    "read_fixture_csv",
    "spec_fingerprint",
    "jsonable",
]


def jsonable(obj):
    """Convert numpy scalars/arrays and non-finite floats into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, rows, columns=None):
    path = Path(path)
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def write_cauchy(directory, table, stem="cauchy"):
    """Write the pair table (columns ``n, m, gap, bound, ci``) and a long-format copy.

    The long file has one row per ``(n, m, quantity)`` for plotting tools.
    """
    directory = Path(directory)
    wide = write_csv(directory / f"{stem}.csv", table.rows, list(table.COLUMNS))
    long_rows = [{"n": r["n"], "m": r["m"], "quantity": q, "value": r[q]}
                 for r in table.rows for q in ("gap", "bound", "ci")]
    long_ = write_csv(directory / f"{stem}_long.csv", long_rows, ["n", "m", "quantity", "value"])
    return wide, long_


def write_report(path, report: dict):
    text = json.dumps(jsonable(report), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")
    return path


def write_ensemble(directory, ensemble, stem="ensemble"):
    """Per-node mean and standard deviation of each state coordinate as CSV."""
    X = ensemble.X
    rows = []
    for i, t in enumerate(ensemble.grid.nodes):
        row = {"t": float(t)}
        for j in range(X.shape[2]):
            row[f"mean{j}"] = float(np.nanmean(X[:, i, j]))
            row[f"std{j}"] = float(np.nanstd(X[:, i, j]))
        rows.append(row)
    return write_csv(Path(directory) / f"{stem}.csv", rows)


def spec_fingerprint(spec, probes: int = 16) -> str:
    """SHA-256 of the linear data, constants and generator values at fixed probe points."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(spec.drift_matrix, dtype=float).tobytes())
    h.update(np.ascontiguousarray(spec.diffusion, dtype=float).tobytes())
    h.update(json.dumps(spec.constants.to_dict(), sort_keys=True).encode())
    d, k = spec.state_dim, spec.noise_dim
    t = np.linspace(-2.0, 2.0, probes)
    x = np.tile(t[:, None], (1, d))
    y = t[::-1].copy()
    z = np.tile(0.5 * t[:, None], (1, k))
    h.update(np.round(np.asarray(spec.generator(x, y, z), dtype=float), 12).tobytes())
    h.update(np.round(np.asarray(spec.drift_fn(x), dtype=float), 12).tobytes())
    return h.hexdigest()


def write_fixture_csv(path, rows, columns, metadata: dict):
    """CSV preceded by ``# key: value`` metadata lines (format version, spec hash, refinements)."""
    path = Path(path)
    meta = {"format_version": 1, **metadata}
    with path.open("w", newline="") as fh:
        for key in sorted(meta):
            fh.write(f"# {key}: {json.dumps(jsonable(meta[key]), sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def read_fixture_csv(path):
    """Return ``(metadata, rows)`` from a file written by :func:`write_fixture_csv`."""
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, val = line[2:].partition(": ")
            meta[key] = json.loads(val)
        else:
            body.append(line)
    rows = [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(body)]
    return meta, rows


def _parse(text):
    try:
        return float(text)
    except ValueError:
        return text
