"""Clustered dose-response (Cl-DRF) estimation by alternating minimization.

Each start alternates three updates until the partition stops changing:

1. per-cluster least squares of y on the design z = f(t, r),
2. reassignment of every unit to the cluster with the smallest squared
   residual (computed with the GPS from the previous iteration),
3. refit of the per-cluster treatment model and refresh of the GPS.

Cluster labels are 0-based in the Python API.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from sklearn.cluster import KMeans

from .model_core import (
    ClDrfError,
    Dataset,
    InsufficientMembers,
    ModelSpec,
    OutcomeModel,
    RankDeficient,
    TreatmentModel,
    design_matrix,
    fit_treatment_cluster,
    normal_pdf,
    treatment_design,
    treatment_ml,
    weighted_ols,
)

__all__ = [
    "AllStartsFailed",
    "ClusterAssignment",
    "FitOptions",
    "FitResult",
    "IterationRecord",
    "initialize",
    "assign_step",
    "update_gps",
    "update_outcome",
    "objective",
    "fit",
    "fit_each_start",
    "fit_given_assignment",
    "start_seed",
]

logger = logging.getLogger(__name__)

INIT_STRATEGIES = ("random-partition", "residual-kmeans")


class AllStartsFailed(ClDrfError):
    """Every start ended in an unrepairable degeneracy."""


@dataclass(frozen=True)
class ClusterAssignment:
    """Hard partition of n units into C clusters, labels in ``0..C-1``."""

    labels: NDArray[np.intp]
    C: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.intp).reshape(-1)
        if labels.size and (labels.min() < 0 or labels.max() >= self.C):
            raise ValueError(f"labels must lie in 0..{self.C - 1}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.labels.size

    def counts(self) -> NDArray[np.intp]:
        return np.bincount(self.labels, minlength=self.C)

    def members(self, c: int) -> NDArray[np.intp]:
        return np.flatnonzero(self.labels == c)


@dataclass(frozen=True)
class FitOptions:
    C: int
    max_iters: int = 100
    n_starts: int = 10
    seed: int = 0
    init_strategy: str = "residual-kmeans"
    spec: ModelSpec = field(default_factory=ModelSpec)

    def __post_init__(self):
        if self.C < 1:
            raise ValueError("C must be at least 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.n_starts < 1:
            raise ValueError("n_starts must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(
                f"init_strategy must be one of {INIT_STRATEGIES}, got {self.init_strategy!r}"
            )

    def check(self, dataset: Dataset) -> None:
        """Raise ValueError if C clusters cannot all be identified."""
        m = self.spec.min_members(dataset.p)
        if self.C * m > dataset.n:
            raise ValueError(
                f"C={self.C} needs at least {self.C * m} units "
                f"({m} per cluster), dataset has {dataset.n}"
            )


@dataclass(frozen=True)
class IterationRecord:
    """Objective values around each half-step of one iteration.

    ``before_update`` is J with the previous coefficients on the current
    design (None on the first iteration); ``after_update`` follows the
    least-squares step; ``after_assign`` follows the argmin reassignment
    and ``after_repair`` any forced moves into undersized clusters.
    """

    before_update: float | None
    after_update: float
    after_assign: float
    after_repair: float
    n_repaired: int


@dataclass(frozen=True)
class FitResult:
    assignment: ClusterAssignment
    treatment: TreatmentModel
    outcome: OutcomeModel
    gps: NDArray[np.float64]
    objective_trace: NDArray[np.float64]
    iterations: int
    converged: bool
    seed_used: int
    spec: ModelSpec
    history: tuple[IterationRecord, ...] = ()
    start_index: int = 0
    start_objectives: tuple[float, ...] = ()
    cycle_length: int = 0

    @property
    def C(self) -> int:
        return self.assignment.C

    @property
    def objective(self) -> float:
        """Final value of J at the returned partition and coefficients."""
        return float(self.objective_trace[-1])

    def design(self, dataset: Dataset) -> NDArray[np.float64]:
        return design_matrix(dataset.t, self.gps, self.spec)


def start_seed(seed: int, start: int) -> int:
    """Seed of start ``start``; a hash of ``(seed, start)`` via SeedSequence."""
    ss = np.random.SeedSequence([int(seed), int(start)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# array-level steps, shared by the public wrappers and the main loop


def _groups(labels, C):
    """Member index arrays per cluster, each in increasing unit order."""
    order = np.argsort(labels, kind="stable")
    bounds = np.cumsum(np.bincount(labels, minlength=C))[:-1]
    return np.split(order, bounds)


def _fit_alpha(Z, y, groups):
    alpha = np.empty((len(groups), Z.shape[1]))
    for c, idx in enumerate(groups):
        try:
            alpha[c] = weighted_ols(Z[idx], y[idx])
        except RankDeficient as exc:
            raise RankDeficient(f"cluster {c}: {exc}", c) from None
    return alpha


def _fit_gps(data: Dataset, A, labels, groups, spec):
    """Per-cluster treatment fits on design ``A`` and each unit's GPS."""
    C = len(groups)
    beta = np.empty((C, A.shape[1]))
    sigma2 = np.empty(C)
    for c, idx in enumerate(groups):
        beta[c], sigma2[c] = treatment_ml(A[idx], data.t[idx], cluster=c)
    model = TreatmentModel(beta, sigma2, spec.treatment_intercept)
    mean = np.einsum("ij,ij->i", A, beta[labels]) if A.shape[1] else np.zeros(data.n)
    return model, normal_pdf(data.t, mean, sigma2[labels])


def _sq_resid(Z, y, alpha):
    return (y[:, None] - Z @ alpha.T) ** 2


def _repair(labels, cost, C, m_min):
    """Move highest-cost units into clusters below ``m_min`` members.

    Donors are units of clusters holding more than ``m_min`` members, taken
    in decreasing cost order (stable, so ties go to the lower unit index).
    """
    labels = labels.copy()
    counts = np.bincount(labels, minlength=C)
    moved = 0
    if counts.min() >= m_min:
        return labels, moved
    order = np.argsort(-cost, kind="stable")
    for c in range(C):
        pos = 0
        while counts[c] < m_min:
            while pos < order.size:
                i = order[pos]
                pos += 1
                src = labels[i]
                if src != c and counts[src] > m_min:
                    break
            else:
                raise InsufficientMembers(f"cannot repair cluster {c}", c)
            labels[i] = c
            counts[src] -= 1
            counts[c] += 1
            moved += 1
    return labels, moved


def _random_partition(n, C, m_min, rng):
    perm = rng.permutation(n)
    labels = rng.integers(0, C, size=n)
    # guarantee min(m_min, n // C) members per cluster before the uniform rest
    per = min(m_min, n // C)
    head = perm[: per * C]
    labels[head] = np.arange(head.size) % C
    return labels.astype(np.intp)


def _residual_kmeans(data: Dataset, C, m_min, rng):
    A = np.column_stack([np.ones(data.n), data.t])
    resid = data.y - A @ weighted_ols(A, data.y)
    if C == 1:
        return np.zeros(data.n, dtype=np.intp)
    km = KMeans(
        n_clusters=C,
        init="k-means++",
        n_init=1,
        max_iter=25,
        random_state=int(rng.integers(0, 2**31 - 1)),
    )
    labels = km.fit_predict(resid.reshape(-1, 1)).astype(np.intp)
    centers = np.zeros(C)
    for c in range(C):
        sel = labels == c
        centers[c] = resid[sel].mean() if sel.any() else 0.0
    cost = (resid - centers[labels]) ** 2
    labels, _ = _repair(labels, cost, C, min(m_min, data.n // C))
    return labels


def _initial_gps(data: Dataset, labels, C, spec):
    """GPS of the initial partition; undersized clusters use the pooled fit."""
    q = spec.treatment_dim(data.p)
    counts = np.bincount(labels, minlength=C)
    pooled = None
    beta = np.empty((C, q))
    sigma2 = np.empty(C)
    for c in range(C):
        try:
            beta[c], sigma2[c] = fit_treatment_cluster(
                data.X, data.t, np.flatnonzero(labels == c), spec, cluster=c
            )
        except (InsufficientMembers, RankDeficient):
            if pooled is None:
                pooled = fit_treatment_cluster(data.X, data.t, np.arange(data.n), spec)
            beta[c], sigma2[c] = pooled
            logger.debug("initial cluster %d (%d units) uses pooled GPS", c, counts[c])
    model = TreatmentModel(beta, sigma2, spec.treatment_intercept)
    return model, model.density(data.t, data.X, labels)


# ---------------------------------------------------------------------------
# public steps


def initialize(
    dataset: Dataset, options: FitOptions, seed: int | None = None
) -> tuple[ClusterAssignment, NDArray[np.float64]]:
    """Initial partition and GPS for one start.

    ``random-partition`` draws labels uniformly after seeding every cluster
    with at least one unit; ``residual-kmeans`` clusters the residuals of
    a pooled regression of y on (1, t) with k-means++ seeding.
    """
    rng = np.random.default_rng(options.seed if seed is None else seed)
    m_min = options.spec.min_members(dataset.p)
    if options.init_strategy == "random-partition":
        labels = _random_partition(dataset.n, options.C, m_min, rng)
    else:
        labels = _residual_kmeans(dataset, options.C, m_min, rng)
    _, gps = _initial_gps(dataset, labels, options.C, options.spec)
    return ClusterAssignment(labels, options.C), gps


def update_outcome(
    dataset: Dataset, assignment: ClusterAssignment, gps, spec: ModelSpec
) -> OutcomeModel:
    """Least-squares outcome coefficients within every cluster."""
    Z = design_matrix(dataset.t, gps, spec)
    alpha = _fit_alpha(Z, dataset.y, _groups(assignment.labels, assignment.C))
    return OutcomeModel(alpha, spec.outcome_terms)


def assign_step(
    dataset: Dataset, gps, outcome_model: OutcomeModel, spec: ModelSpec
) -> ClusterAssignment:
    """Assign each unit to the cluster with the smallest squared residual.

    The design uses the unit's current GPS value; ties go to the lowest
    cluster index.
    """
    Z = design_matrix(dataset.t, gps, spec)
    labels = np.argmin(_sq_resid(Z, dataset.y, outcome_model.alpha), axis=1)
    return ClusterAssignment(labels, outcome_model.C)


def update_gps(
    dataset: Dataset, assignment: ClusterAssignment, spec: ModelSpec
) -> tuple[TreatmentModel, NDArray[np.float64]]:
    """Refit the treatment model per cluster and evaluate each unit's GPS
    under its own cluster."""
    A = treatment_design(dataset.X, spec.treatment_intercept)
    labels = assignment.labels
    return _fit_gps(dataset, A, labels, _groups(labels, assignment.C), spec)


def objective(
    dataset: Dataset,
    assignment: ClusterAssignment,
    outcome_model: OutcomeModel,
    gps,
    spec: ModelSpec,
) -> float:
    """Within-cluster residual sum of squares J."""
    Z = design_matrix(dataset.t, gps, spec)
    resid = dataset.y - outcome_model.predict(Z, assignment.labels)
    return float(resid @ resid)


# ---------------------------------------------------------------------------
# main loop


def _run_start(data: Dataset, options: FitOptions, labels, seed_used, start):
    spec, C, y = options.spec, options.C, data.y
    m_min = spec.min_members(data.p)
    rows = np.arange(data.n)
    A = treatment_design(data.X, spec.treatment_intercept)
    treatment, gps = _initial_gps(data, labels, C, spec)
    Z = design_matrix(data.t, gps, spec)
    alpha = None
    history = []
    states = [labels]
    seen = {labels.tobytes(): 0}
    converged = False
    cycle = 0
    it = 0
    for it in range(1, options.max_iters + 1):
        groups = _groups(labels, C)
        before = None
        if alpha is not None:
            before = float(np.sum(_sq_resid(Z, y, alpha)[rows, labels]))
        alpha = _fit_alpha(Z, y, groups)
        sq = _sq_resid(Z, y, alpha)
        after_update = float(np.sum(sq[rows, labels]))

        new = np.argmin(sq, axis=1)
        after_assign = float(np.sum(sq[rows, new]))
        new, moved = _repair(new, sq[rows, new], C, m_min)
        after_repair = float(np.sum(sq[rows, new])) if moved else after_assign
        history.append(
            IterationRecord(before, after_update, after_assign, after_repair, moved)
        )
        if np.array_equal(new, labels):
            converged = True
            break
        key = new.tobytes()
        if key in seen:
            # the partition sequence is now periodic; keep its best member
            first = seen[key]
            cycle = len(states) - first
            best = first + int(np.argmin([h.after_update for h in history[first:]]))
            labels = states[best]
            treatment, gps = _fit_gps(data, A, labels, _groups(labels, C), spec)
            Z = design_matrix(data.t, gps, spec)
            break
        seen[key] = len(states)
        states.append(new)
        labels = new
        treatment, gps = _fit_gps(data, A, labels, _groups(labels, C), spec)
        Z = design_matrix(data.t, gps, spec)

    # coefficients consistent with the final partition and GPS
    alpha = _fit_alpha(Z, y, _groups(labels, C))
    final = float(np.sum(_sq_resid(Z, y, alpha)[rows, labels]))
    trace = np.array([h.after_update for h in history] + [final])
    return FitResult(
        assignment=ClusterAssignment(labels, C),
        treatment=treatment,
        outcome=OutcomeModel(alpha, spec.outcome_terms),
        gps=gps,
        objective_trace=trace,
        iterations=it,
        converged=converged,
        seed_used=seed_used,
        spec=spec,
        history=tuple(history),
        start_index=start,
        cycle_length=cycle,
    )


def fit_each_start(dataset: Dataset, options: FitOptions, init_labels=None) -> list:
    """Run every start and return its FitResult, or the ClDrfError it raised.

    When ``init_labels`` is given it is used as the single starting
    partition; with C = 1 all starts coincide so only one is run.
    """
    options.check(dataset)
    if init_labels is not None:
        labels = ClusterAssignment(init_labels, options.C).labels.copy()
        if labels.size != dataset.n:
            raise ValueError("init_labels length differs from dataset size")
        plan = [(labels, options.seed)]
    else:
        n_starts = 1 if options.C == 1 else options.n_starts
        plan = [(None, start_seed(options.seed, s)) for s in range(n_starts)]

    out = []
    for s, (labels, seed) in enumerate(plan):
        try:
            if labels is None:
                labels = initialize(dataset, options, seed)[0].labels.copy()
            out.append(_run_start(dataset, options, labels, seed, s))
        except ClDrfError as exc:
            logger.debug("start %d failed: %s", s, exc)
            out.append(exc)
    return out


def fit(dataset: Dataset, options: FitOptions, init_labels=None) -> FitResult:
    """Fit the clustered dose-response model with ``options.C`` clusters.

    Runs ``options.n_starts`` independent starts and keeps the one with the
    lowest final objective (ties: lowest start index). When ``init_labels``
    is given it is used as the single starting partition.

    Raises
    ------
    AllStartsFailed
        If every start hits a degeneracy that reseeding cannot repair.
    """
    runs = fit_each_start(dataset, options, init_labels)
    best = None
    for res in runs:
        if isinstance(res, FitResult) and (best is None or res.objective < best.objective):
            best = res
    if best is None:
        raise AllStartsFailed("; ".join(f"start {s}: {e}" for s, e in enumerate(runs)))
    objectives = tuple(
        r.objective if isinstance(r, FitResult) else float("inf") for r in runs
    )
    return replace(best, start_objectives=objectives)


def fit_given_assignment(
    dataset: Dataset, labels, spec: ModelSpec, C: int | None = None
) -> FitResult:
    """Treatment and outcome models for a fixed partition, no reassignment.

    This is the per-cluster two-step GPS regression on a known partition.
    """
    labels = np.asarray(labels, dtype=np.intp)
    C = int(labels.max()) + 1 if C is None else C
    groups = _groups(labels, C)
    A = treatment_design(dataset.X, spec.treatment_intercept)
    treatment, gps = _fit_gps(dataset, A, labels, groups, spec)
    Z = design_matrix(dataset.t, gps, spec)
    alpha = _fit_alpha(Z, dataset.y, groups)
    J = float(np.sum(_sq_resid(Z, dataset.y, alpha)[np.arange(dataset.n), labels]))
    return FitResult(
        assignment=ClusterAssignment(labels, C),
        treatment=treatment,
        outcome=OutcomeModel(alpha, spec.outcome_terms),
        gps=gps,
        objective_trace=np.array([J]),
        iterations=0,
        converged=True,
        seed_used=0,
        spec=spec,
    )

