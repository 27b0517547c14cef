"""Per-cluster average dose-response functions from a fitted partition."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .estimator import FitResult
from .model_core import Dataset, design_matrix, gps_density

__all__ = ["AdrfCurve", "UnknownCluster", "estimate_adrf", "default_grid"]


class UnknownCluster(ValueError):
    pass


@dataclass(frozen=True)
class AdrfCurve:
    """Estimated mean potential outcome of one cluster along ``grid``."""

    cluster: int
    grid: NDArray[np.float64]
    mu: NDArray[np.float64]
    support: tuple[float, float]

    @property
    def in_support(self) -> NDArray[np.bool_]:
        lo, hi = self.support
        return (self.grid >= lo) & (self.grid <= hi)


def _members(fit: FitResult, cluster: int) -> NDArray[np.intp]:
    if not 0 <= cluster < fit.C:
        raise UnknownCluster(f"cluster {cluster} not in 0..{fit.C - 1}")
    return fit.assignment.members(cluster)


def estimate_adrf(dataset: Dataset, fit: FitResult, cluster: int, grid) -> AdrfCurve:
    """Average the cluster's outcome model over its members at each dose.

    For every grid value t the GPS of each member is re-evaluated at t
    with the member's own covariates and the cluster's treatment model,
    then ``alpha_c' z(t, r_i(t))`` is averaged over the members.
    """
    idx = _members(fit, cluster)
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 0 or not np.all(np.isfinite(grid)):
        raise ValueError("grid must be non-empty and finite")
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    spec = fit.spec
    alpha = fit.outcome.alpha[cluster]
    t_members = dataset.t[idx]
    support = (float(t_members.min()), float(t_members.max()))

    T = np.repeat(grid, idx.size)
    if spec.uses_gps:
        beta = fit.treatment.beta[cluster]
        sigma2 = fit.treatment.sigma2[cluster]
        R = np.asarray(gps_density(grid[:, None], dataset.X[idx][None], beta, sigma2))
        R = R.reshape(-1)
    else:
        R = np.zeros_like(T)
    pred = design_matrix(T, R, spec) @ alpha
    mu = pred.reshape(grid.size, idx.size).mean(axis=1)
    return AdrfCurve(cluster, grid, mu, support)


def default_grid(
    dataset: Dataset, fit: FitResult, cluster: int, points: int = 100, extended: bool = False
) -> NDArray[np.float64]:
    """Evenly spaced doses over the cluster's observed treatment range.

    ``extended=True`` spans the full-sample range instead. A support of a
    single value yields a one-point grid and a warning.
    """
    if points < 2:
        raise ValueError("points must be at least 2")
    idx = _members(fit, cluster)
    t = dataset.t if extended else dataset.t[idx]
    lo, hi = float(t.min()), float(t.max())
    if lo == hi:
        warnings.warn(f"cluster {cluster} has a single treatment value", stacklevel=2)
        return np.array([lo])
    return np.linspace(lo, hi, points)
