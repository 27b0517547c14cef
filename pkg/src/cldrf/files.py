"""CSV and JSON serialization for datasets, partitions, fits and curves.

Numbers are written with 17 significant digits so that reading a file
back reproduces every float exactly. Files are UTF-8 with LF endings.
Cluster labels in files are 1-based.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adrf import AdrfCurve
from .estimator import ClusterAssignment, FitResult
from .model_core import Dataset, ModelSpec, OutcomeModel, TreatmentModel

SCHEMA_VERSION = 1


class DataError(ValueError):
    """Malformed input file."""


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


def write_json(path: Path, obj) -> None:
    text = json.dumps(_jsonable(obj), indent=2, allow_nan=False)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def _read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not UTF-8: {exc}") from None
    if not rows:
        raise DataError(f"{path}: empty file, header row required")
    return [h.strip() for h in rows[0]], rows[1:]


def _parse_float(cell: str, path, row: int) -> float:
    try:
        x = float(cell)
    except ValueError:
        raise DataError(f"{path}: row {row}: {cell!r} is not a number") from None
    if not math.isfinite(x):
        raise DataError(f"{path}: row {row}: non-finite value {cell!r}")
    return x


def read_dataset(path) -> Dataset:
    """Read a ``y,t,x1..xp`` CSV; row numbers in errors count data rows from 1."""
    path = Path(path)
    header, rows = _read_table(path)
    if header[:2] != ["y", "t"] or any(h != f"x{j + 1}" for j, h in enumerate(header[2:])):
        raise DataError(f"{path}: header must be y,t,x1..xp, got {','.join(header)}")
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i}: expected {len(header)} fields, got {len(row)}")
        values[i - 1] = [_parse_float(c, path, i) for c in row]
    return Dataset(values[:, 0], values[:, 1], values[:, 2:])


def write_dataset(path, data: Dataset) -> None:
    header = ["y", "t"] + [f"x{j + 1}" for j in range(data.p)]
    rows = (
        [data.y[i], data.t[i], *data.X[i]] for i in range(data.n)
    )
    write_rows(Path(path), header, rows)


def write_assignment(path, labels, column: str = "cluster") -> None:
    labels = np.asarray(labels)
    write_rows(Path(path), ["unit", column], ([i + 1, int(c) + 1] for i, c in enumerate(labels)))


def read_labels(path) -> np.ndarray:
    """Labels from the last column of a ``unit,<cluster>`` CSV, 0-based."""
    path = Path(path)
    header, rows = _read_table(path)
    if len(header) < 2:
        raise DataError(f"{path}: expected unit and cluster columns")
    out = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i}: expected {len(header)} fields, got {len(row)}")
        try:
            out[i - 1] = int(row[-1]) - 1
        except ValueError:
            raise DataError(f"{path}: row {i}: {row[-1]!r} is not an integer label") from None
    return out


def fit_to_dict(fit: FitResult, data: Dataset, options=None) -> dict:
    counts = fit.assignment.counts()
    clusters = []
    for c in range(fit.C):
        clusters.append(
            {
                "cluster": c + 1,
                "size": int(counts[c]),
                "alpha": fit.outcome.alpha[c],
                "beta": fit.treatment.beta[c],
                "sigma2": float(fit.treatment.sigma2[c]),
            }
        )
    out = {
        "schema_version": SCHEMA_VERSION,
        "n": data.n,
        "p": data.p,
        "C": fit.C,
        "spec": {
            "outcome_terms": list(fit.spec.outcome_terms),
            "treatment_intercept": fit.spec.treatment_intercept,
        },
    }
    if options is not None:
        out["options"] = {
            "max_iters": options.max_iters,
            "n_starts": options.n_starts,
            "seed": options.seed,
            "init_strategy": options.init_strategy,
        }
    out.update(
        {
            "converged": fit.converged,
            "iterations": fit.iterations,
            "cycle_length": fit.cycle_length,
            "seed_used": fit.seed_used,
            "start_index": fit.start_index,
            "objective": fit.objective,
            "objective_trace": fit.objective_trace,
            "start_objectives": list(fit.start_objectives),
            "clusters": clusters,
            "labels": fit.assignment.labels + 1,
        }
    )
    return out


def fit_from_dict(doc: dict, data: Dataset) -> FitResult:
    """Rebuild a FitResult from :func:`fit_to_dict` output and its data."""
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported schema_version {doc.get('schema_version')!r}")
    try:
        spec = ModelSpec(
            bool(doc["spec"]["treatment_intercept"]), tuple(doc["spec"]["outcome_terms"])
        )
        C = int(doc["C"])
        labels = np.asarray(doc["labels"], dtype=np.intp) - 1
        cl = sorted(doc["clusters"], key=lambda d: d["cluster"])
        alpha = np.array([d["alpha"] for d in cl], dtype=float).reshape(C, spec.k)
        beta = np.array([d["beta"] for d in cl], dtype=float).reshape(C, -1)
        sigma2 = np.array([d["sigma2"] for d in cl], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed fit report: {exc}") from None
    if labels.size != data.n:
        raise DataError(f"fit report covers {labels.size} units, data has {data.n}")
    treatment = TreatmentModel(beta, sigma2, spec.treatment_intercept)
    gps = treatment.density(data.t, data.X, labels)
    return FitResult(
        assignment=ClusterAssignment(labels, C),
        treatment=treatment,
        outcome=OutcomeModel(alpha, spec.outcome_terms),
        gps=gps,
        objective_trace=np.asarray(doc.get("objective_trace", [np.nan]), dtype=float),
        iterations=int(doc.get("iterations", 0)),
        converged=bool(doc.get("converged", False)),
        seed_used=int(doc.get("seed_used", 0)),
        spec=spec,
    )


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def write_curves(path, curves: Iterable[AdrfCurve]) -> None:
    def rows():
        for cv in curves:
            inside = cv.in_support
            for g, m, s in zip(cv.grid, cv.mu, inside):
                yield [cv.cluster + 1, g, m, bool(s)]

    write_rows(Path(path), ["cluster", "t", "mu", "in_support"], rows())
