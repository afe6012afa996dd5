"""Core dataset and parameter containers shared by all modules.

Missing values are tracked by explicit 0/1 masks (``R`` for confounder
entries, ``R_Y`` for outcomes); the float arrays hold NaN at masked
positions so that a masked payload can never silently enter arithmetic.
All containers freeze their arrays after construction and are safe to
share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

VALID_ESTIMATORS = ("regression", "ipw", "aipw", "matching")


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ObservedDataset:
    """Per-unit treatment, outcome and confounders with missingness masks.

    Attributes:
        A: (n,) binary treatment indicator.
        Y: (n,) outcomes; NaN where ``R_Y == 0``.
        X: (n, p) confounders; NaN where ``R == 0``.
        R: (n, p) observedness mask for X (1 = observed).
        R_Y: (n,) observedness mask for Y.
    """

    A: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    R: np.ndarray
    R_Y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen(self.A, int))
        object.__setattr__(self, "Y", _frozen(self.Y))
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "R", _frozen(np.atleast_2d(self.R), int))
        object.__setattr__(self, "R_Y", _frozen(self.R_Y, int))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def fully_observed(self) -> np.ndarray:
        """Boolean mask of units with every X coordinate and Y observed."""
        return (self.R.min(axis=1) == 1) & (self.R_Y == 1)

    @property
    def is_complete(self) -> bool:
        return bool(self.R.all() and self.R_Y.all())

    @classmethod
    def from_complete(cls, A, Y, X) -> "ObservedDataset":
        """Wrap fully observed arrays (all masks set to 1)."""
        A = np.asarray(A)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return cls(A=A, Y=Y, X=X, R=np.ones_like(X, dtype=int),
                   R_Y=np.ones(A.shape[0], dtype=int))


@dataclass(frozen=True)
class ImputedDataset:
    """One completed copy of an observed dataset.

    Observed entries are copied verbatim from the base; only masked
    entries differ. ``j`` is the 1-based imputation index and
    ``theta_draw`` the posterior draw that produced the imputations.
    """

    base: ObservedDataset
    j: int
    Xstar: np.ndarray
    Ystar: np.ndarray
    theta_draw: Optional["ThetaParams"] = None

    def __post_init__(self):
        object.__setattr__(self, "Xstar", _frozen(np.atleast_2d(self.Xstar)))
        object.__setattr__(self, "Ystar", _frozen(self.Ystar))

    @property
    def A(self) -> np.ndarray:
        return self.base.A

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def p(self) -> int:
        return self.base.p


@dataclass(frozen=True)
class ThetaParams:
    """Joint-model parameters.

    ``beta0``/``beta1`` are outcome coefficient vectors of length p+1
    (leading intercept), ``sigma0``/``sigma1`` outcome SDs, ``alpha``
    the propensity probit coefficients (p+1), ``mu_x``/``sigma_x`` the
    covariate Gaussian parameters, and ``gamma_x``/``gamma_y`` the
    missingness probit coefficients (present only when a missingness
    model is part of the analysis, i.e. under MNAR).
    """

    beta0: np.ndarray
    beta1: np.ndarray
    sigma0: float
    sigma1: float
    alpha: np.ndarray
    mu_x: np.ndarray
    sigma_x: np.ndarray
    gamma_x: dict = field(default_factory=dict)   # coord index -> coef vector
    gamma_y: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "beta0", _frozen(self.beta0))
        object.__setattr__(self, "beta1", _frozen(self.beta1))
        object.__setattr__(self, "alpha", _frozen(self.alpha))
        object.__setattr__(self, "mu_x", _frozen(self.mu_x))
        object.__setattr__(self, "sigma_x", _frozen(np.atleast_2d(self.sigma_x)))
        object.__setattr__(
            self, "gamma_x", {int(k): _frozen(v) for k, v in self.gamma_x.items()})
        if self.gamma_y is not None:
            object.__setattr__(self, "gamma_y", _frozen(self.gamma_y))
        if not (self.sigma0 > 0 and self.sigma1 > 0):
            raise ValueError("outcome SDs must be strictly positive")
        eig = np.linalg.eigvalsh(self.sigma_x)
        if eig.min() <= 0:
            raise ValueError("sigma_x must be symmetric positive-definite")

    def beta(self, a: int) -> np.ndarray:
        return self.beta1 if a == 1 else self.beta0

    def sigma(self, a: int) -> float:
        return self.sigma1 if a == 1 else self.sigma0


@dataclass(frozen=True)
class EstimatorKind:
    """Selection of a full-sample ACE estimator.

    ``M`` (number of matches) and ``match_on`` apply to matching only;
    ``match_on`` is ``"covariates"`` (Euclidean distance on X) or
    ``"propensity"`` (distance on the fitted propensity score).
    """

    tag: str
    M: int = 1
    match_on: str = "covariates"

    def __post_init__(self):
        if self.tag not in VALID_ESTIMATORS:
            raise ValueError(f"unknown estimator tag: {self.tag!r}")
        if self.tag == "matching" and self.M < 1:
            raise ValueError("M must be >= 1 for matching")
        if self.match_on not in ("covariates", "propensity"):
            raise ValueError(f"unknown match_on: {self.match_on!r}")


REGRESSION = EstimatorKind("regression")
IPW = EstimatorKind("ipw")
AIPW = EstimatorKind("aipw")
MATCHING = EstimatorKind("matching", M=1)


@dataclass(frozen=True)
class CompleteArrays:
    """Bare complete-data triple without masks.

    Used where a complete dataset is assembled from arrays rather than
    imputation (e.g. the stacked imputations behind a frozen plug-in fit).
    """

    A: np.ndarray
    Y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A))
        object.__setattr__(self, "Y", np.asarray(self.Y, dtype=float))
        object.__setattr__(self, "X", np.atleast_2d(np.asarray(self.X, dtype=float)))


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(data: ObservedDataset) -> ValidationReport:
    """Check every dataset invariant and report all violations.

    The function never raises; callers decide whether to abort.
    """
    v = []
    n, p = data.n, data.p
    if n < 2:
        v.append(f"need at least 2 units, got {n}")
    if not np.isin(data.A, (0, 1)).all():
        v.append("treatment A contains values outside {0,1}")
    if not np.isin(data.R, (0, 1)).all():
        v.append("mask R contains values outside {0,1}")
    if not np.isin(data.R_Y, (0, 1)).all():
        v.append("mask R_Y contains values outside {0,1}")
    if data.Y.shape != (n,) or data.R_Y.shape != (n,) or data.R.shape != (n, p):
        v.append("array shapes are inconsistent")
        return ValidationReport(tuple(v))

    has_x = np.isfinite(data.X)
    for i, j in zip(*np.nonzero(has_x != (data.R == 1))):
        v.append(f"mask/value mismatch at ({i},{j})")
    has_y = np.isfinite(data.Y)
    for i in np.nonzero(has_y != (data.R_Y == 1))[0]:
        v.append(f"outcome mask/value mismatch at unit {i}")

    full = data.fully_observed
    if not (data.A[full] == 1).any():
        v.append("empty treated arm (among fully observed units)")
    if not (data.A[full] == 0).any():
        v.append("empty control arm (among fully observed units)")
    return ValidationReport(tuple(v))


def as_complete(data) -> tuple:
    """Return (A, Y, X) arrays from a complete dataset.

    Accepts an :class:`ImputedDataset`, a fully observed
    :class:`ObservedDataset`, or a :class:`CompleteArrays` triple.
    """
    if isinstance(data, ImputedDataset):
        return data.base.A, data.Ystar, data.Xstar
    if isinstance(data, CompleteArrays):
        return data.A, data.Y, data.X
    if isinstance(data, ObservedDataset):
        if not data.is_complete:
            raise ValueError("dataset has missing entries; impute first")
        return data.A, data.Y, data.X
    raise TypeError(f"unsupported dataset type: {type(data)!r}")
