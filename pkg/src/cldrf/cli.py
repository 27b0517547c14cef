"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 input data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import files
from .adrf import UnknownCluster, default_grid, estimate_adrf
from .estimator import INIT_STRATEGIES, AllStartsFailed, FitOptions, fit
from .model_core import ClDrfError, ModelSpec, spec_from_name
from .selection import ELBOW_METHODS, select_clusters
from .simulation import (
    SCENARIOS,
    ScenarioConfig,
    generate,
    rand_index,
    run_replications,
    scenario_spec,
)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULTS = {
    "seed": 0,
    "starts": 10,
    "max_iters": 100,
    "spec": "linear",
    "out": ".",
    "treatment_intercept": True,
    "init": "residual-kmeans",
    "cmax": 7,
    "elbow": "eq10",
    "criterion": "ic",
    "baseline": "gps",
    "penalty": "total",
    "points": 100,
    "extended": False,
    "jobs": 1,
}

SCENARIO_DEFAULTED = ("spec", "treatment_intercept")


class ConfigError(Exception):
    pass


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _shared(p: argparse.ArgumentParser, fitting: bool = True) -> None:
    p.add_argument("--seed", type=int, help="base random seed (default 0)")
    p.add_argument("--config", type=Path, help="key = value file; flags override it")
    p.add_argument("--out", type=Path, help="output directory (default .)")
    if fitting:
        p.add_argument("--starts", type=int, help="random starts per fit (default 10)")
        p.add_argument("--max-iters", type=int, help="iteration cap per start (default 100)")
        p.add_argument("--spec", choices=("linear", "quadratic"), help="outcome model form")
        p.add_argument("--init", choices=INIT_STRATEGIES, help="initial partition")
        p.add_argument(
            "--treatment-intercept",
            type=_bool,
            metavar="BOOL",
            help="constant in the treatment regression (default true)",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cldrf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a scenario dataset")
    _shared(p, fitting=False)
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--n", type=int)

    p = sub.add_parser("fit", help="fit with a fixed number of clusters")
    _shared(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--clusters", type=int)

    p = sub.add_parser("select", help="choose the number of clusters")
    _shared(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--cmax", type=int)
    p.add_argument("--elbow", choices=ELBOW_METHODS)
    p.add_argument("--criterion", choices=("ic", "objective"))
    p.add_argument("--baseline", choices=("gps", "ols"))
    p.add_argument("--penalty", choices=("total", "per-cluster"))

    p = sub.add_parser("adrf", help="dose-response curves from a fit report")
    _shared(p, fitting=False)
    p.add_argument("--data", type=Path)
    p.add_argument("--fit", type=Path, help="fit.json written by the fit command")
    p.add_argument("--cluster", type=int, help="1-based cluster (default: all)")
    p.add_argument("--points", type=int)
    p.add_argument("--extended", type=_bool, nargs="?", const=True, metavar="BOOL")

    p = sub.add_parser("replicate", help="Monte Carlo replications of a scenario")
    _shared(p)
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--cmax", type=int)
    p.add_argument("--jobs", type=int, help="worker processes (default 1)")

    p = sub.add_parser("rand-index", help="Rand index of two partition files")
    p.add_argument("path_a", type=Path)
    p.add_argument("path_b", type=Path)
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _load_config(path: Path, sub: argparse.ArgumentParser) -> dict:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in actions:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        action = actions[dest]
        try:
            conv = action.type(value) if action.type else value
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
        if action.choices is not None and conv not in action.choices:
            raise ConfigError(f"{path}:{lineno}: {key} must be one of {list(action.choices)}")
        out[dest] = conv
    return out


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Merge flags over the config file over built-in defaults."""
    merged = dict(vars(args))
    if getattr(args, "config", None) is not None:
        for k, v in _load_config(args.config, _subparser(parser, args.command)).items():
            if merged.get(k) is None:
                merged[k] = v
    # replicate falls back to the scenario's own model form
    keep = SCENARIO_DEFAULTED if args.command == "replicate" else ()
    for k, v in DEFAULTS.items():
        if k in merged and merged[k] is None and k not in keep:
            merged[k] = v
    return argparse.Namespace(**merged)


def _require(cfg, *names):
    missing = [n for n in names if getattr(cfg, n, None) is None]
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        raise ConfigError(f"missing required setting(s): {flags}")


def _out_dir(cfg) -> Path:
    out = Path(cfg.out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"--out {out} is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_input(path: Path, flag: str) -> None:
    if not path.is_file():
        raise ConfigError(f"{flag} {path}: no such file")


def _fit_options(cfg, C: int = 1, spec: ModelSpec | None = None) -> FitOptions:
    if cfg.seed < 0:
        raise ConfigError("--seed must be non-negative")
    try:
        return FitOptions(
            C=C,
            max_iters=cfg.max_iters,
            n_starts=cfg.starts,
            seed=cfg.seed,
            init_strategy=cfg.init,
            spec=spec or spec_from_name(cfg.spec, cfg.treatment_intercept),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(cfg) -> int:
    _require(cfg, "scenario", "n")
    try:
        config = ScenarioConfig(cfg.scenario, cfg.n, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(cfg)
    ld = generate(config)
    files.write_dataset(out / "data.csv", ld.data)
    files.write_assignment(out / "truth.csv", ld.truth.labels, "true_cluster")
    return 0


def cmd_fit(cfg) -> int:
    _require(cfg, "data", "clusters")
    _check_input(cfg.data, "--data")
    options = _fit_options(cfg, C=cfg.clusters)
    out = _out_dir(cfg)
    data = files.read_dataset(cfg.data)
    try:
        options.check(data)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    res = fit(data, options)
    doc = files.fit_to_dict(res, data, options)
    doc["command"] = "fit"
    files.write_json(out / "fit.json", doc)
    files.write_assignment(out / "assignment.csv", res.assignment.labels)
    return 0


def cmd_select(cfg) -> int:
    _require(cfg, "data")
    _check_input(cfg.data, "--data")
    if cfg.cmax < 3:
        raise ConfigError("--cmax must be at least 3")
    options = _fit_options(cfg)
    out = _out_dir(cfg)
    data = files.read_dataset(cfg.data)
    try:
        replace(options, C=cfg.cmax).check(data)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report = select_clusters(
        data,
        cfg.cmax,
        options,
        method=cfg.elbow,
        criterion=cfg.criterion,
        baseline=cfg.baseline,
        per_cluster_penalty=cfg.penalty == "per-cluster",
    )
    doc = {
        "schema_version": files.SCHEMA_VERSION,
        "command": "select",
        "C_max": cfg.cmax,
        "method": report.method,
        "criterion": report.criterion,
        "baseline": report.baseline,
        "penalty": cfg.penalty,
        "chosen_C": report.chosen_C,
        "degenerate": report.degenerate,
        "baseline_ic": report.baseline_ic,
        "baseline_objective": report.baseline_objective,
        "candidates": [
            {"C": c.C, "ic": c.ic, "objective": c.objective, "converged": c.fit.converged}
            for c in report.candidates
        ],
        "failures": {str(k): v for k, v in report.failures.items()},
        "chosen_fit": files.fit_to_dict(report.chosen_fit, data, options),
    }
    files.write_json(out / "selection.json", doc)
    rows = [[1, report.baseline_ic, report.baseline_objective]]
    rows += [[c.C, c.ic, c.objective] for c in report.candidates]
    files.write_rows(out / "ic.csv", ["C", "ic", "objective"], rows)
    files.write_assignment(out / "assignment.csv", report.chosen_fit.assignment.labels)
    return 0


def cmd_adrf(cfg) -> int:
    _require(cfg, "data", "fit")
    _check_input(cfg.data, "--data")
    _check_input(cfg.fit, "--fit")
    if cfg.points < 2:
        raise ConfigError("--points must be at least 2")
    out = _out_dir(cfg)
    data = files.read_dataset(cfg.data)
    doc = files.read_json(cfg.fit)
    if "chosen_fit" in doc:
        doc = doc["chosen_fit"]
    res = files.fit_from_dict(doc, data)
    clusters = range(res.C) if cfg.cluster is None else [cfg.cluster - 1]
    curves = []
    for c in clusters:
        try:
            grid = default_grid(data, res, c, cfg.points, extended=cfg.extended)
        except UnknownCluster as exc:
            raise ConfigError(f"--cluster {cfg.cluster}: {exc}") from None
        curves.append(estimate_adrf(data, res, c, grid))
    files.write_curves(out / "adrf.csv", curves)
    return 0


def cmd_replicate(cfg) -> int:
    _require(cfg, "scenario", "n", "reps")
    if cfg.reps < 1:
        raise ConfigError("--reps must be at least 1")
    if cfg.cmax < 3:
        raise ConfigError("--cmax must be at least 3")
    if cfg.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    try:
        config = ScenarioConfig(cfg.scenario, cfg.n, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    own = scenario_spec(cfg.scenario)
    intercept = own.treatment_intercept if cfg.treatment_intercept is None else cfg.treatment_intercept
    terms = own.outcome_terms if cfg.spec is None else spec_from_name(cfg.spec).outcome_terms
    options = _fit_options(cfg, spec=ModelSpec(intercept, terms))
    out = _out_dir(cfg)
    summary = run_replications(config, cfg.reps, options, cfg.cmax, n_jobs=cfg.jobs)
    rows = summary.rows()
    header = list(rows[0].keys())
    files.write_rows(out / "replications.csv", header, ([r[h] for h in header] for r in rows))
    (out / "replication_report.txt").write_text(summary.report(), encoding="utf-8")
    return 0


def cmd_rand_index(cfg) -> int:
    a = files.read_labels(cfg.path_a)
    b = files.read_labels(cfg.path_b)
    if a.size != b.size:
        raise files.DataError(f"length mismatch: {a.size} vs {b.size} units")
    print(format(rand_index(a, b), ".17g"))
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "select": cmd_select,
    "adrf": cmd_adrf,
    "replicate": cmd_replicate,
    "rand-index": cmd_rand_index,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve(args, parser)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"cldrf: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except files.DataError as exc:
        print(f"cldrf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AllStartsFailed, ClDrfError) as exc:
        print(f"cldrf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
