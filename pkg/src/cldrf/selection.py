"""Choosing the number of clusters: BIC-like criterion plus elbow rule."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .estimator import FitOptions, FitResult, fit
from .model_core import SIGMA2_FLOOR, ClDrfError, Dataset, weighted_ols

__all__ = [
    "DegenerateElbowWarning",
    "Candidate",
    "Elbow",
    "SelectionReport",
    "information_criterion",
    "elbow_select",
    "select_clusters",
]

logger = logging.getLogger(__name__)

ELBOW_METHODS = ("eq10", "line-distance")
_LOG_2PI = float(np.log(2.0 * np.pi))


class DegenerateElbowWarning(UserWarning):
    """The criterion curve shows no elbow."""


def _gaussian_nll2(resid: np.ndarray, labels: np.ndarray, C: int) -> float:
    """-2 log-likelihood with a per-cluster ML residual variance."""
    total = 0.0
    for c in range(C):
        e = resid[labels == c]
        if e.size == 0:
            continue
        rss = float(e @ e)
        s2 = max(rss / e.size, SIGMA2_FLOOR)
        total += e.size * (_LOG_2PI + np.log(s2)) + rss / s2
    return total


def information_criterion(
    dataset: Dataset, fit: FitResult, per_cluster_penalty: bool = False
) -> float:
    """BIC-like criterion of a fitted partition.

    ``-2 log L + log(n) * C * k`` where L is the Gaussian likelihood of the
    outcome residuals with a separate ML variance per cluster and k the
    number of outcome coefficients per cluster. ``per_cluster_penalty``
    drops the factor C.
    """
    labels = fit.assignment.labels
    Z = fit.design(dataset)
    resid = dataset.y - fit.outcome.predict(Z, labels)
    dim = fit.spec.k * (1 if per_cluster_penalty else fit.C)
    return _gaussian_nll2(resid, labels, fit.C) + np.log(dataset.n) * dim


class Elbow(NamedTuple):
    chosen: int
    degenerate: bool
    scores: np.ndarray


def _is_degenerate(values: np.ndarray) -> bool:
    if np.all(np.diff(values) >= 0):
        return True
    if values.size >= 3:
        scale = max(float(np.max(np.abs(values))), 1.0)
        return bool(np.all(np.abs(np.diff(values, 2)) <= 1e-9 * scale))
    return False


def elbow_select(
    values: Sequence[float],
    baseline: float,
    method: str = "eq10",
    cs: Sequence[int] | None = None,
) -> Elbow:
    """Pick the number of clusters at the elbow of a criterion curve.

    Parameters
    ----------
    values : sequence of float
        Criterion at ``c = 2, ..., C_max`` (or at ``cs`` if given).
    baseline : float
        Criterion of the model without clusters, placed at c = 0.
    method : {"eq10", "line-distance"}
        ``"eq10"`` minimizes ``baseline / C_max * c + values[c]``.
        ``"line-distance"`` maximizes the gap between the chord from
        ``(0, baseline)`` to ``(C_max, values[C_max])`` and the curve.

    When the curve is non-decreasing or exactly linear there is no elbow:
    the c with the smallest value is returned, ``degenerate`` is set and a
    :class:`DegenerateElbowWarning` is issued.
    """
    values = np.asarray(values, dtype=float)
    cs = np.arange(2, 2 + values.size) if cs is None else np.asarray(cs, dtype=int)
    if cs.size != values.size:
        raise ValueError("cs and values differ in length")
    if method not in ELBOW_METHODS:
        raise ValueError(f"method must be one of {ELBOW_METHODS}")
    c_max = int(cs.max())
    if c_max < 3:
        raise ValueError("C_max must be at least 3")
    if not (np.all(np.isfinite(values)) and np.isfinite(baseline)):
        raise ValueError("criterion values must be finite")

    if method == "eq10":
        scores = baseline / c_max * cs + values
        best = int(np.argmin(scores))
    else:
        end = values[np.flatnonzero(cs == c_max)[-1]]
        chord = baseline + (end - baseline) * cs / c_max
        scores = chord - values
        best = int(np.argmax(scores))

    if _is_degenerate(values):
        warnings.warn(
            "criterion curve has no elbow; returning its minimizer",
            DegenerateElbowWarning,
            stacklevel=2,
        )
        return Elbow(int(cs[int(np.argmin(values))]), True, scores)
    return Elbow(int(cs[best]), False, scores)


@dataclass(frozen=True)
class Candidate:
    C: int
    ic: float
    objective: float
    fit: FitResult


@dataclass
class SelectionReport:
    candidates: list[Candidate]
    baseline_ic: float
    baseline_objective: float
    chosen_C: int
    method: str
    criterion: str = "ic"
    baseline: str = "gps"
    degenerate: bool = False
    baseline_fit: FitResult | None = None
    failures: dict[int, str] = field(default_factory=dict)

    def fit_for(self, C: int) -> FitResult:
        if C == 1 and self.baseline_fit is not None:
            return self.baseline_fit
        for cand in self.candidates:
            if cand.C == C:
                return cand.fit
        raise KeyError(f"no fit stored for C={C}")

    @property
    def chosen_fit(self) -> FitResult:
        return self.fit_for(self.chosen_C)


def _ols_baseline(dataset: Dataset) -> tuple[float, float]:
    A = np.column_stack([np.ones(dataset.n), dataset.t])
    resid = dataset.y - A @ weighted_ols(A, dataset.y)
    nll2 = _gaussian_nll2(resid, np.zeros(dataset.n, dtype=int), 1)
    return nll2 + np.log(dataset.n) * 2, float(resid @ resid)


def select_clusters(
    dataset: Dataset,
    C_max: int,
    options: FitOptions,
    method: str = "eq10",
    criterion: str = "ic",
    baseline: str = "gps",
    per_cluster_penalty: bool = False,
) -> SelectionReport:
    """Fit C = 1, ..., C_max and choose C by the elbow of the criterion.

    ``options.C`` is ignored. The C = 1 fit (pooled GPS regression) is the
    baseline unless ``baseline="ols"``, which regresses y on (1, t) only.
    ``criterion="objective"`` applies the elbow to the raw objective J
    instead of the information criterion.
    """
    if C_max < 3:
        raise ValueError("C_max must be at least 3")
    if criterion not in ("ic", "objective"):
        raise ValueError("criterion must be 'ic' or 'objective'")
    if baseline not in ("gps", "ols"):
        raise ValueError("baseline must be 'gps' or 'ols'")
    if method not in ELBOW_METHODS:
        raise ValueError(f"method must be one of {ELBOW_METHODS}")
    replace(options, C=C_max).check(dataset)

    base_fit = fit(dataset, replace(options, C=1))
    if baseline == "gps":
        base_ic = information_criterion(dataset, base_fit, per_cluster_penalty)
        base_obj = base_fit.objective
    else:
        base_ic, base_obj = _ols_baseline(dataset)

    candidates, failures = [], {}
    for c in range(2, C_max + 1):
        try:
            res = fit(dataset, replace(options, C=c))
        except ClDrfError as exc:
            failures[c] = str(exc)
            logger.info("candidate C=%d excluded: %s", c, exc)
            continue
        ic = information_criterion(dataset, res, per_cluster_penalty)
        candidates.append(Candidate(c, ic, res.objective, res))
    if not candidates:
        raise ClDrfError(f"every candidate failed: {failures}")

    cs = [cand.C for cand in candidates]
    if criterion == "ic":
        values, base_value = [cand.ic for cand in candidates], base_ic
    else:
        values, base_value = [cand.objective for cand in candidates], base_obj
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateElbowWarning)
        elbow = elbow_select(values, base_value, method, cs)
    if elbow.degenerate:
        logger.warning("no elbow in the criterion curve; chose C=%d", elbow.chosen)
    return SelectionReport(
        candidates=candidates,
        baseline_ic=float(base_ic),
        baseline_objective=float(base_obj),
        chosen_C=elbow.chosen,
        method=method,
        criterion=criterion,
        baseline=baseline,
        degenerate=elbow.degenerate,
        baseline_fit=base_fit,
        failures=failures,
    )
