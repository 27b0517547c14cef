"""Simulation scenarios, clustering agreement and the Monte Carlo harness.

Random numbers come from numpy's PCG64 (``np.random.default_rng``).
Replication ``r`` of a configuration with seed ``s`` uses seed ``s + r``
for both data generation and fitting, so serial and parallel runs agree.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from .adrf import estimate_adrf
from .estimator import ClusterAssignment, FitOptions, FitResult, fit
from .model_core import Dataset, ModelSpec
from .selection import select_clusters

__all__ = [
    "SCENARIOS",
    "ScenarioConfig",
    "TrueCurves",
    "LabeledDataset",
    "ReplicationSummary",
    "scenario_spec",
    "scenario_clusters",
    "generate",
    "rand_index",
    "contingency",
    "match_clusters",
    "run_replications",
]

logger = logging.getLogger(__name__)


# Covariate supports per cluster as ((a1, b1), (a2, b2)).
_BOUNDS_MOTIVATING = (
    ((0.0, 0.4), (0.0, 0.4)),
    ((0.2, 0.6), (0.3, 0.6)),
    ((0.5, 0.8), (0.5, 0.9)),
    ((0.7, 1.0), (0.7, 1.0)),
)
_BOUNDS_C4 = (
    ((0.0, 0.4), (0.0, 0.5)),
    ((0.2, 0.6), (0.3, 0.6)),
    ((0.5, 0.8), (0.5, 0.9)),
    ((0.7, 1.0), (0.7, 1.0)),
)
# the fifth cluster sits in the top corner, both covariates U[0.9, 1]
_BOUNDS_C5 = _BOUNDS_MOTIVATING + (((0.9, 1.0), (0.9, 1.0)),)

_BETA_MOTIVATING = ((3, 1.5, 1.2), (3, 1.8, 1.5), (3, 2, 1.8), (3, 2.2, 2))
_BETA_LINEAR = ((1.7, 2), (1.2, 1.2), (0.7, 0.5), (0.5, 0.2), (0.4, 0.1))

# outcome mean a0 + a1 t + a2 t^2 per cluster
_CURVES_MOTIVATING = ((5, 2, 1.6), (15, -1, -1.6), (-5, 2, 0), (25, -1, 0))
_CURVES_LINEAR = ((5, 1, 0), (15, -2, 0), (-5, -0.01, 0), (25, 2, 0), (-20, -10, 0))

RANDOM_TREATMENT_MEAN = 1.0

SCENARIOS = (
    "motivating",
    "linear-c3",
    "linear-c4",
    "linear-c5",
    "random-c3",
    "random-c4",
    "random-c5",
)


@dataclass(frozen=True)
class _Scenario:
    C: int
    bounds: tuple | None
    beta: tuple | None
    curves: tuple
    intercept: bool
    spec: ModelSpec


def _scenario(name: str) -> _Scenario:
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    if name == "motivating":
        return _Scenario(
            4, _BOUNDS_MOTIVATING, _BETA_MOTIVATING, _CURVES_MOTIVATING, True,
            ModelSpec.quadratic(treatment_intercept=True),
        )
    if name.startswith("linear-c"):
        C = int(name[-1])
        bounds = _BOUNDS_C4 if C == 4 else _BOUNDS_C5[:C]
        return _Scenario(
            C, bounds, _BETA_LINEAR[:C], _CURVES_LINEAR[:C], False,
            ModelSpec.linear(treatment_intercept=False),
        )
    if name.startswith("random-c"):
        C = int(name[-1])
        return _Scenario(
            C, None, None, _CURVES_LINEAR[:C], True,
            ModelSpec.linear(treatment_intercept=True),
        )
    raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIOS}")


def scenario_spec(name: str) -> ModelSpec:
    """Model specification matching the data-generating process."""
    return _scenario(name).spec


def scenario_clusters(name: str) -> int:
    return _scenario(name).C


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    n: int
    seed: int = 0

    def __post_init__(self):
        C = _scenario(self.scenario).C
        if self.n < C or self.n % C:
            raise ValueError(
                f"n={self.n} must be a positive multiple of {C} for scenario {self.scenario}"
            )
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def C(self) -> int:
        return _scenario(self.scenario).C


@dataclass(frozen=True)
class TrueCurves:
    """Closed-form mean outcome per cluster, ``coef[c] = (a0, a1, a2)``."""

    coef: NDArray[np.float64]

    def __call__(self, t, cluster: int) -> NDArray[np.float64]:
        a0, a1, a2 = self.coef[cluster]
        t = np.asarray(t, dtype=float)
        return a0 + a1 * t + a2 * t * t

    @property
    def C(self) -> int:
        return self.coef.shape[0]


@dataclass(frozen=True)
class LabeledDataset:
    data: Dataset
    truth: ClusterAssignment
    true_curves: TrueCurves
    config: ScenarioConfig
    spec: ModelSpec


def generate(config: ScenarioConfig, noise: float = 1.0) -> LabeledDataset:
    """Simulate one dataset; units come in cluster blocks of ``n / C``.

    Draw order per cluster: each covariate column, treatment noise, then
    outcome noise. ``noise`` scales only the outcome error.
    """
    sc = _scenario(config.scenario)
    rng = np.random.default_rng(config.seed)
    m = config.n // sc.C
    ys, ts, Xs = [], [], []
    for c in range(sc.C):
        if sc.bounds is None:
            X = np.empty((m, 0))
            mean = np.full(m, RANDOM_TREATMENT_MEAN)
        else:
            X = np.column_stack([rng.uniform(a, b, size=m) for a, b in sc.bounds[c]])
            beta = np.asarray(sc.beta[c], dtype=float)
            mean = beta[0] + X @ beta[1:] if sc.intercept else X @ beta
        t = mean + rng.standard_normal(m)
        a0, a1, a2 = sc.curves[c]
        y = a0 + a1 * t + a2 * t * t + noise * rng.standard_normal(m)
        ys.append(y)
        ts.append(t)
        Xs.append(X)
    data = Dataset(np.concatenate(ys), np.concatenate(ts), np.vstack(Xs))
    truth = ClusterAssignment(np.repeat(np.arange(sc.C), m), sc.C)
    curves = TrueCurves(np.asarray(sc.curves, dtype=float))
    return LabeledDataset(data, truth, curves, config, sc.spec)


def _labels(a) -> NDArray:
    return a.labels if isinstance(a, ClusterAssignment) else np.asarray(a).reshape(-1)


def contingency(a, b) -> NDArray[np.int64]:
    """Counts of units per (label in a, label in b)."""
    a, b = _labels(a), _labels(b)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max(initial=-1) + 1, ib.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def _pairs(x):
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def rand_index(a, b) -> float:
    """Share of unit pairs placed together in both or apart in both.

    Labels are arbitrary hashable integers; computed from the contingency
    table in O(n + K_a K_b).
    """
    table = contingency(a, b)
    n = int(table.sum())
    total = n * (n - 1) // 2
    if total == 0:
        return 1.0
    same_both = int(_pairs(table).sum())
    same_a = int(_pairs(table.sum(axis=1)).sum())
    same_b = int(_pairs(table.sum(axis=0)).sum())
    agree = total + 2 * same_both - same_a - same_b
    return agree / total


def match_clusters(truth, estimate) -> dict[int, int]:
    """One-to-one matching of true to estimated clusters by overlap.

    Starts from the greedy matching (repeatedly pair the labels with the
    largest overlap, ties to the lower true then lower estimated label),
    then applies pairwise swaps, including swaps with unmatched estimated
    labels, while any swap strictly increases the total overlap.
    """
    a, b = _labels(truth), _labels(estimate)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ua.size, ub.size), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    work = table.astype(float)
    pair = {}
    for _ in range(min(ua.size, ub.size)):
        i, j = np.unravel_index(np.argmax(work), work.shape)
        pair[int(i)] = int(j)
        work[i, :] = -1
        work[:, j] = -1

    improved = True
    while improved:
        improved = False
        rows = sorted(pair)
        for x in rows:
            for y in rows:
                if y <= x:
                    continue
                jx, jy = pair[x], pair[y]
                if table[x, jy] + table[y, jx] > table[x, jx] + table[y, jy]:
                    pair[x], pair[y] = jy, jx
                    improved = True
            used = set(pair.values())
            for j in range(ub.size):
                if j not in used and table[x, j] > table[x, pair[x]]:
                    pair[x] = j
                    improved = True
                    used = set(pair.values())
    return {int(ua[i]): int(ub[j]) for i, j in sorted(pair.items())}


def curve_rmse(
    ld: LabeledDataset, fit: FitResult, true_c: int, est_c: int, points: int = 100
) -> tuple[float, float]:
    """RMSE and least-squares slope of the fitted curve on the common support.

    The support is the overlap of the estimated and true clusters'
    observed treatment ranges.
    """
    t = ld.data.t
    t_true = t[ld.truth.labels == true_c]
    t_est = t[fit.assignment.labels == est_c]
    lo = max(t_true.min(), t_est.min())
    hi = min(t_true.max(), t_est.max())
    if not hi > lo:
        return float("nan"), float("nan")
    grid = np.linspace(lo, hi, points)
    mu = estimate_adrf(ld.data, fit, est_c, grid).mu
    err = mu - ld.true_curves(grid, true_c)
    slope = np.polyfit(grid, mu, 1)[0]
    return float(np.sqrt(np.mean(err**2))), float(slope)


@dataclass
class ReplicationSummary:
    reps: int
    true_C: int
    rand_index: NDArray[np.float64]
    chosen_C: NDArray[np.int64]
    adrf_rmse: NDArray[np.float64]
    adrf_slope: NDArray[np.float64]
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def mean_rand_index(self) -> float:
        return float(np.nanmean(self.rand_index))

    @property
    def sd_rand_index(self) -> float:
        return float(np.nanstd(self.rand_index, ddof=1)) if self.reps > 1 else 0.0

    @property
    def mode_C(self) -> int:
        vals = self.chosen_C[self.chosen_C > 0]
        if vals.size == 0:
            return 0
        counts = np.bincount(vals)
        return int(np.argmax(counts))

    @property
    def hit_rate(self) -> float:
        return float(np.mean(self.chosen_C == self.true_C))

    def rows(self) -> list[dict]:
        out = []
        for r in range(self.reps):
            row = {"rep": r, "chosen_C": int(self.chosen_C[r]), "rand_index": self.rand_index[r]}
            for c in range(self.true_C):
                row[f"rmse_{c + 1}"] = self.adrf_rmse[r, c]
                row[f"slope_{c + 1}"] = self.adrf_slope[r, c]
            row["failure"] = self.failures.get(r, "")
            out.append(row)
        return out

    def report(self) -> str:
        lines = [
            f"replications: {self.reps}",
            f"failures: {len(self.failures)}",
            f"true C: {self.true_C}",
            f"chosen C mode: {self.mode_C}",
            f"chosen C hit rate: {self.hit_rate:.4f}",
            f"rand index mean: {self.mean_rand_index:.6f}",
            f"rand index sd: {self.sd_rand_index:.6f}",
        ]
        with np.errstate(all="ignore"):
            for c in range(self.true_C):
                col = self.adrf_rmse[:, c]
                ok = col[np.isfinite(col)]
                med = float(np.median(ok)) if ok.size else float("nan")
                lines.append(f"cluster {c + 1} adrf rmse median: {med:.6f} ({ok.size} matched)")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class _RepTask:
    config: ScenarioConfig
    rep: int
    options: FitOptions
    C_max: int
    fixed_C: int | None
    select_kwargs: tuple


def _one_rep(task: _RepTask):
    seed = (task.config.seed + task.rep) % 2**64
    ld = generate(replace(task.config, seed=seed))
    options = replace(task.options, seed=seed)
    C_true = ld.truth.C
    try:
        if task.fixed_C is None:
            report = select_clusters(ld.data, task.C_max, options, **dict(task.select_kwargs))
            chosen, res = report.chosen_C, report.chosen_fit
        else:
            chosen = task.fixed_C
            res = fit(ld.data, replace(options, C=chosen))
    except Exception as exc:  # noqa: BLE001 - per-rep failures are recorded
        return task.rep, 0, np.nan, np.full(C_true, np.nan), np.full(C_true, np.nan), repr(exc)
    ri = rand_index(ld.truth, res.assignment)
    rmse = np.full(C_true, np.nan)
    slope = np.full(C_true, np.nan)
    for tc, ec in match_clusters(ld.truth, res.assignment).items():
        rmse[tc], slope[tc] = curve_rmse(ld, res, tc, ec)
    return task.rep, chosen, ri, rmse, slope, None


def run_replications(
    config: ScenarioConfig,
    reps: int,
    fit_options: FitOptions | None = None,
    C_max: int = 7,
    n_jobs: int = 1,
    fixed_C: int | None = None,
    **select_kwargs,
) -> ReplicationSummary:
    """Monte Carlo study of cluster-number selection and ADRF recovery.

    Each replication simulates a dataset, selects C with the elbow rule
    (or fits at ``fixed_C``), and scores the chosen fit against the truth.
    ``fit_options.C`` and ``fit_options.seed`` are overridden per rep; when
    ``fit_options`` is None the scenario's own model specification is used.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if fit_options is None:
        fit_options = FitOptions(C=1, spec=scenario_spec(config.scenario))
    tasks = [
        _RepTask(config, r, fit_options, C_max, fixed_C, tuple(sorted(select_kwargs.items())))
        for r in range(reps)
    ]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_one_rep, tasks))
    else:
        results = [_one_rep(t) for t in tasks]

    C_true = config.C
    ri = np.full(reps, np.nan)
    chosen = np.zeros(reps, dtype=np.int64)
    rmse = np.full((reps, C_true), np.nan)
    slope = np.full((reps, C_true), np.nan)
    failures = {}
    for rep, c, r_i, e, s, err in results:
        chosen[rep], ri[rep], rmse[rep], slope[rep] = c, r_i, e, s
        if err is not None:
            failures[rep] = err
            logger.warning("replication %d failed: %s", rep, err)
    return ReplicationSummary(reps, C_true, ri, chosen, rmse, slope, failures)
