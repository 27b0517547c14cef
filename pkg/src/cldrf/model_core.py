"""Dense numerical primitives shared by the estimator.

Design rows for the outcome model, least squares over a member subset,
the per-cluster Gaussian treatment model and the generalized propensity
score (GPS) density it induces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg.lapack import dgels

__all__ = [
    "ClDrfError",
    "RankDeficient",
    "InsufficientMembers",
    "SIGMA2_FLOOR",
    "RANK_TOL",
    "TERMS",
    "LINEAR",
    "QUADRATIC",
    "Dataset",
    "ModelSpec",
    "TreatmentModel",
    "OutcomeModel",
    "build_design",
    "design_matrix",
    "treatment_design",
    "weighted_ols",
    "fit_treatment_cluster",
    "gps_density",
    "normal_pdf",
    "treatment_ml",
]

SIGMA2_FLOOR = 1e-10
RANK_TOL = 1e-10

TERMS = ("1", "t", "t2", "r", "r2", "tr")
LINEAR = ("1", "t", "r")
QUADRATIC = ("1", "t", "t2", "r", "r2", "tr")

_LOG_2PI = float(np.log(2.0 * np.pi))


class ClDrfError(Exception):
    """Base class for estimation failures."""


class RankDeficient(ClDrfError):
    """Member design matrix does not have full column rank."""

    def __init__(self, message: str, cluster: int | None = None):
        super().__init__(message)
        self.cluster = cluster


class InsufficientMembers(ClDrfError):
    """Too few members to identify a cluster's model."""

    def __init__(self, message: str, cluster: int | None = None):
        super().__init__(message)
        self.cluster = cluster


@dataclass(frozen=True)
class Dataset:
    """Outcomes ``y``, treatments ``t`` and covariates ``X`` for n units.

    ``X`` may have zero columns (treatment unrelated to covariates).
    """

    y: NDArray[np.float64]
    t: NDArray[np.float64]
    X: NDArray[np.float64]

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        t = np.array(self.t, dtype=float).reshape(-1)
        if y.size < 1:
            raise ValueError("dataset must contain at least one unit")
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(y.size, -1)
        if t.size != y.size or X.shape[0] != y.size:
            raise ValueError(
                f"length mismatch: y={y.size}, t={t.size}, X rows={X.shape[0]}"
            )
        for name, arr in (("y", y), ("t", t), ("X", X)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        for arr in (y, t, X):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class ModelSpec:
    """Functional form of the treatment and outcome models.

    Parameters
    ----------
    treatment_intercept : bool
        Include a constant in the regression of t on X.
    outcome_terms : sequence of str
        Ordered outcome basis drawn from ``{"1", "t", "t2", "r", "r2", "tr"}``
        where ``r`` is the GPS and ``tr`` the product ``t * r``.
    """

    treatment_intercept: bool = True
    outcome_terms: tuple[str, ...] = LINEAR

    def __post_init__(self):
        terms = tuple(self.outcome_terms)
        object.__setattr__(self, "outcome_terms", terms)
        if not terms:
            raise ValueError("outcome_terms must be non-empty")
        unknown = [s for s in terms if s not in TERMS]
        if unknown:
            raise ValueError(f"unknown outcome terms {unknown}; allowed {TERMS}")
        if len(set(terms)) != len(terms):
            raise ValueError("outcome_terms contains duplicates")
        if "t2" in terms and "t" not in terms:
            raise ValueError("t2 requires t")
        if "r2" in terms and "r" not in terms:
            raise ValueError("r2 requires r")

    @classmethod
    def linear(cls, treatment_intercept: bool = True) -> "ModelSpec":
        return cls(treatment_intercept, LINEAR)

    @classmethod
    def quadratic(cls, treatment_intercept: bool = True) -> "ModelSpec":
        return cls(treatment_intercept, QUADRATIC)

    @property
    def k(self) -> int:
        """Number of outcome coefficients per cluster."""
        return len(self.outcome_terms)

    @property
    def uses_gps(self) -> bool:
        return any("r" in s for s in self.outcome_terms)

    def treatment_dim(self, p: int) -> int:
        return p + int(self.treatment_intercept)

    def min_members(self, p: int) -> int:
        """Smallest cluster size at which both models are identified."""
        return max(self.k, self.treatment_dim(p)) + 1


def _term_column(term: str, t: NDArray, r: NDArray) -> NDArray:
    if term == "1":
        return np.ones_like(t)
    if term == "t":
        return t
    if term == "t2":
        return t * t
    if term == "r":
        return r
    if term == "r2":
        return r * r
    return t * r


def design_matrix(t: ArrayLike, r: ArrayLike, spec: ModelSpec) -> NDArray[np.float64]:
    """Stack outcome design rows for vectors ``t`` and ``r``, shape (n, k)."""
    t = np.asarray(t, dtype=float).reshape(-1)
    r = np.broadcast_to(np.asarray(r, dtype=float), t.shape)
    Z = np.empty((t.size, spec.k))
    for j, term in enumerate(spec.outcome_terms):
        Z[:, j] = _term_column(term, t, r)
    return Z


def build_design(t_i: float, r_i: float, spec: ModelSpec) -> NDArray[np.float64]:
    """Design row z_i for one unit, in ``spec.outcome_terms`` order."""
    return design_matrix([t_i], [r_i], spec)[0]


def treatment_design(X: ArrayLike, intercept: bool) -> NDArray[np.float64]:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if intercept:
        return np.column_stack([np.ones(X.shape[0]), X])
    return X


def _select(members, n: int) -> NDArray[np.intp]:
    if members is None:
        return np.arange(n)
    idx = np.asarray(members)
    if idx.dtype == bool:
        if idx.size != n:
            raise ValueError("boolean member mask has wrong length")
        return np.flatnonzero(idx)
    return idx.astype(np.intp, copy=False).reshape(-1)


def _lstsq_qr(A: NDArray, b: NDArray) -> NDArray:
    """Least squares by Householder QR (LAPACK ``dgels``).

    Raises RankDeficient when a pivot of R is below ``RANK_TOL`` times the
    norm of its column.
    """
    m, k = A.shape
    if m < k:
        raise RankDeficient(f"{m} rows cannot identify {k} coefficients")
    qr, x, info = dgels(A, b)
    diag = np.abs(np.diagonal(qr)[:k])
    col_norm = np.sqrt(np.einsum("ij,ij->j", A, A))
    if info > 0 or np.any(diag <= RANK_TOL * np.maximum(col_norm, np.finfo(float).tiny)):
        raise RankDeficient("design matrix is rank deficient within tolerance 1e-10")
    return x[:k].copy()


def weighted_ols(Z: ArrayLike, y: ArrayLike, members=None) -> NDArray[np.float64]:
    """Least-squares coefficients of ``y`` on ``Z`` over the member rows.

    ``members`` is an index array or boolean mask (all rows when None).
    Solved by orthogonal decomposition; never forms ``(Z'Z)^-1``.

    Raises
    ------
    RankDeficient
        If the member rows of ``Z`` have rank below ``Z.shape[1]``.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if members is not None:
        idx = _select(members, Z.shape[0])
        Z, y = Z[idx], y[idx]
    return _lstsq_qr(Z, y)


def fit_treatment_cluster(
    X: ArrayLike,
    t: ArrayLike,
    members,
    spec: ModelSpec,
    cluster: int | None = None,
) -> tuple[NDArray[np.float64], float]:
    """Gaussian ML fit of t on X over the members of one cluster.

    Returns ``(beta, sigma2)`` with ``sigma2 = RSS / n_c`` floored at
    :data:`SIGMA2_FLOOR`. ``beta`` leads with the intercept when
    ``spec.treatment_intercept`` is set. ``members=None`` uses every row.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    t = np.asarray(t, dtype=float).reshape(-1)
    idx = _select(members, t.size)
    A = treatment_design(X[idx], spec.treatment_intercept)
    return treatment_ml(A, t[idx], cluster)


def treatment_ml(A: NDArray, t: NDArray, cluster: int | None = None) -> tuple[NDArray, float]:
    """ML normal regression of ``t`` on the rows of design ``A``."""
    m, q = A.shape
    if m < q + 1:
        raise InsufficientMembers(
            f"cluster {cluster}: {m} members, need at least {q + 1}", cluster
        )
    if q == 0:
        beta = np.empty(0)
        resid = t
    else:
        try:
            beta = _lstsq_qr(A, t)
        except RankDeficient as exc:
            raise RankDeficient(f"cluster {cluster}: {exc}", cluster) from None
        resid = t - A @ beta
    sigma2 = max(float(resid @ resid) / m, SIGMA2_FLOOR)
    return beta, sigma2


def normal_pdf(t, mean, sigma2) -> NDArray[np.float64]:
    """Normal density evaluated through its logarithm."""
    z2 = (np.asarray(t, dtype=float) - mean) ** 2
    return np.exp(-0.5 * (_LOG_2PI + np.log(sigma2)) - z2 / (2.0 * sigma2))


def _treatment_mean(x: NDArray, beta: NDArray) -> NDArray:
    p = x.shape[-1]
    if beta.size == p + 1:
        return beta[0] + x @ beta[1:]
    if beta.size == p:
        return x @ beta if p else np.zeros(x.shape[:-1])
    raise ValueError(f"beta has {beta.size} entries for {p} covariates")


def gps_density(t, x, beta, sigma2) -> NDArray[np.float64] | float:
    """Normal density of treatment ``t`` given covariates ``x``.

    ``beta`` carries a leading intercept when it is one entry longer than
    ``x``. Evaluated on the log scale; far tails underflow to 0.
    Broadcasts over rows of ``x`` and entries of ``t``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    out = normal_pdf(t, _treatment_mean(x, np.asarray(beta, dtype=float)), sigma2)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class TreatmentModel:
    """Per-cluster treatment regressions; row c of ``beta`` is cluster c."""

    beta: NDArray[np.float64]
    sigma2: NDArray[np.float64]
    intercept: bool

    @property
    def C(self) -> int:
        return self.sigma2.size

    def mean(self, X: NDArray, labels: NDArray) -> NDArray:
        A = treatment_design(X, self.intercept)
        if A.shape[1] == 0:
            return np.zeros(A.shape[0])
        return np.einsum("ij,ij->i", A, self.beta[labels])

    def density(self, t: NDArray, X: NDArray, labels: NDArray) -> NDArray:
        """GPS of each unit under the cluster given by ``labels``."""
        return normal_pdf(t, self.mean(X, labels), self.sigma2[labels])


@dataclass(frozen=True)
class OutcomeModel:
    """Per-cluster outcome coefficients, shape (C, k)."""

    alpha: NDArray[np.float64]
    terms: tuple[str, ...] = field(default=LINEAR)

    @property
    def C(self) -> int:
        return self.alpha.shape[0]

    def predict(self, Z: NDArray, labels: NDArray) -> NDArray:
        return np.einsum("ij,ij->i", Z, self.alpha[labels])


def spec_from_name(name: str, treatment_intercept: bool = True) -> ModelSpec:
    if name == "linear":
        return ModelSpec.linear(treatment_intercept)
    if name == "quadratic":
        return ModelSpec.quadratic(treatment_intercept)
    raise ValueError(f"unknown spec {name!r}; expected 'linear' or 'quadratic'")

