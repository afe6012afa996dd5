"""Full-sample ACE estimators, their influence functions, and variances.

Everything here operates on complete data. Four point estimators are
provided (outcome regression, IPW, AIPW, nearest-neighbor matching with
replacement), together with per-unit influence values in which every
population expectation is replaced by a sample mean at the fitted
parameters. That plug-in convention centers the influence values at the
point estimate exactly for the smooth estimators.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import log_ndtr, ndtr

from .data_model import EstimatorKind, as_complete
from .errors import EstimationError

logger = logging.getLogger(__name__)

# Fitted propensities are clipped to [EHAT_CLIP, 1 - EHAT_CLIP]; overlap is
# assumed but finite samples can violate it numerically.
EHAT_CLIP = 1e-3

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def design(X: np.ndarray) -> np.ndarray:
    """Augment a covariate matrix with a leading constant-1 column."""
    X = np.atleast_2d(X)
    return np.column_stack([np.ones(X.shape[0]), X])


# ---------------------------------------------------------------------------
# Probit regression (Newton-Raphson with analytic derivatives)
# ---------------------------------------------------------------------------

def _mills(t: np.ndarray) -> np.ndarray:
    # phi(t) / Phi(t), stable in the lower tail
    return np.exp(-0.5 * t * t - _LOG_SQRT_2PI - log_ndtr(t))


def probit_loglik(alpha, W, z) -> float:
    t = W @ alpha
    return float(np.sum(np.where(z == 1, log_ndtr(t), log_ndtr(-t))))


def probit_score(alpha, W, z) -> np.ndarray:
    """Total score of the probit log-likelihood at ``alpha``."""
    return probit_score_matrix(alpha, W, z).sum(axis=0)


def probit_score_matrix(alpha, W, z) -> np.ndarray:
    """Per-unit probit score rows: w * phi * (z - Phi) / {Phi (1 - Phi)}."""
    t = W @ alpha
    m = np.where(z == 1, _mills(t), -_mills(-t))
    return W * m[:, None]


def probit_hessian(alpha, W, z) -> np.ndarray:
    """Analytic (observed) Hessian; negative definite for any data."""
    t = W @ alpha
    lam1 = _mills(t)
    lam0 = _mills(-t)
    h = np.where(z == 1, -lam1 * (lam1 + t), -lam0 * (lam0 - t))
    return (W * h[:, None]).T @ W


def fit_probit(W, z, tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Probit MLE by Newton-Raphson, stopping at sup-norm(score) < tol.

    Raises EstimationError carrying the iteration trace (sup-norms of the
    score) when the fit does not converge, e.g. under separation.
    """
    alpha = np.zeros(W.shape[1])
    trace = []
    for _ in range(max_iter):
        s = probit_score(alpha, W, z)
        sup = float(np.abs(s).max())
        trace.append(sup)
        if sup < tol:
            return alpha
        H = probit_hessian(alpha, W, z)
        try:
            step = np.linalg.solve(H, -s)
        except np.linalg.LinAlgError as exc:
            raise EstimationError("singular design", context=trace) from exc
        # Dampen exploding steps (near-separation); Newton is retried from
        # the shrunk iterate on the next pass.
        norm = np.abs(step).max()
        if norm > 10.0:
            step *= 10.0 / norm
        alpha = alpha + step
        # Under separation the score decays to zero along a divergent
        # coefficient path; treat that as non-convergence, not success.
        # |alpha| = 50 means fitted probabilities beyond 1e-100 at unit
        # scale, far outside any overlap-respecting fit.
        if np.abs(alpha).max() > 50.0:
            raise EstimationError(
                "probit coefficients diverged (separated data?)",
                context=trace)
    raise EstimationError(
        f"probit did not converge in {max_iter} iterations "
        f"(last sup-norm {trace[-1]:.3e})", context=trace)


# ---------------------------------------------------------------------------
# Nuisance fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NuisanceFit:
    """Fitted outcome regressions and propensity model on one dataset.

    ``ehat`` holds fitted propensities clipped to
    [EHAT_CLIP, 1 - EHAT_CLIP]; ``propensity_cols`` records which
    covariate columns entered the propensity design (None = all), which
    supports deliberate misspecification in experiments.
    """

    beta0_hat: np.ndarray
    beta1_hat: np.ndarray
    sigma0_hat: float
    sigma1_hat: float
    alpha_hat: np.ndarray
    ehat: np.ndarray
    mu0_hat: np.ndarray
    mu1_hat: np.ndarray
    propensity_cols: Optional[tuple] = None

    def propensity_design(self, X: np.ndarray) -> np.ndarray:
        if self.propensity_cols is None:
            return design(X)
        return design(np.atleast_2d(X)[:, list(self.propensity_cols)])

    def propensity(self, X: np.ndarray, clip: bool = True) -> np.ndarray:
        e = ndtr(self.propensity_design(X) @ self.alpha_hat)
        if clip:
            n_out = int(((e < EHAT_CLIP) | (e > 1 - EHAT_CLIP)).sum())
            if n_out:
                logger.debug("propensity clipping triggered for %d units", n_out)
            e = np.clip(e, EHAT_CLIP, 1 - EHAT_CLIP)
        return e

    def mu(self, a: int, X: np.ndarray) -> np.ndarray:
        beta = self.beta1_hat if a == 1 else self.beta0_hat
        return design(X) @ beta


def _ols(W, y):
    rank = np.linalg.matrix_rank(W)
    if rank < W.shape[1]:
        raise EstimationError("singular design")
    beta, _, _, _ = np.linalg.lstsq(W, y, rcond=None)
    resid = y - W @ beta
    dof = max(W.shape[0] - W.shape[1], 1)
    return beta, float(np.sqrt(resid @ resid / dof))


def fit_nuisance(data, propensity_cols=None) -> NuisanceFit:
    """Fit arm-wise OLS outcome models and the probit propensity model.

    Args:
        data: complete dataset (ImputedDataset or fully observed
            ObservedDataset).
        propensity_cols: optional covariate column subset for the
            propensity design (used to study misspecification).
    """
    A, Y, X = as_complete(data)
    W = design(X)
    treated = A == 1
    if not treated.any() or treated.all():
        raise EstimationError("both treatment arms must be nonempty")
    beta1, sigma1 = _ols(W[treated], Y[treated])
    beta0, sigma0 = _ols(W[~treated], Y[~treated])

    if propensity_cols is None:
        Wp = W
    else:
        Wp = design(X[:, list(propensity_cols)])
    alpha = fit_probit(Wp, A)
    e_raw = ndtr(Wp @ alpha)
    n_out = int(((e_raw < EHAT_CLIP) | (e_raw > 1 - EHAT_CLIP)).sum())
    if n_out:
        logger.debug("propensity clipping triggered for %d units", n_out)
    ehat = np.clip(e_raw, EHAT_CLIP, 1 - EHAT_CLIP)

    return NuisanceFit(
        beta0_hat=beta0, beta1_hat=beta1,
        sigma0_hat=sigma0, sigma1_hat=sigma1,
        alpha_hat=alpha, ehat=ehat,
        mu0_hat=W @ beta0, mu1_hat=W @ beta1,
        propensity_cols=None if propensity_cols is None else tuple(propensity_cols),
    )


# ---------------------------------------------------------------------------
# Matching structure
# ---------------------------------------------------------------------------

def match_variable(X, fit: NuisanceFit, kind: EstimatorKind) -> np.ndarray:
    if kind.match_on == "propensity":
        return fit.propensity(X)[:, None]
    return np.atleast_2d(X)


def match_neighbors(matchvar: np.ndarray, A: np.ndarray, M: int):
    """Nearest-M opposite-arm neighbors under Euclidean distance.

    Distances are compared exactly on the computed doubles; ties go to
    the lowest unit index. Returns (neighbor_mean_y_factory, K_M) where
    ``neighbors`` is an (n, M) array of matched unit indices and ``K_M``
    counts how often each unit appears in a neighbor set.

    Raises EstimationError when an arm has fewer than M units.
    """
    A = np.asarray(A)
    V = np.atleast_2d(np.asarray(matchvar, dtype=float))
    n = A.shape[0]
    idx1 = np.nonzero(A == 1)[0]
    idx0 = np.nonzero(A == 0)[0]
    if len(idx1) < M or len(idx0) < M:
        raise EstimationError("insufficient matches")

    neighbors = np.empty((n, M), dtype=int)
    for q_idx, pool_idx in ((idx1, idx0), (idx0, idx1)):
        # Chunked O(n^2) scan: exact, deterministic, fine at desk scale.
        # Squared distances via the dot-product expansion (BLAS-backed).
        pool = V[pool_idx]
        pool_sq = np.einsum("ij,ij->i", pool, pool)
        for start in range(0, len(q_idx), 1024):
            rows = q_idx[start:start + 1024]
            qs = V[rows]
            d2 = (np.einsum("ij,ij->i", qs, qs)[:, None] + pool_sq[None, :]
                  - 2.0 * qs @ pool.T)
            if M == 1:
                # argmin returns the first minimum: lowest pool position,
                # and pool_idx is sorted, so lowest unit index.
                neighbors[rows, 0] = pool_idx[np.argmin(d2, axis=1)]
            else:
                order = np.argsort(d2, axis=1, kind="stable")[:, :M]
                neighbors[rows] = pool_idx[order]
    K_M = np.bincount(neighbors.ravel(), minlength=n)
    return neighbors, K_M


def _matching_potentials(A, Y, neighbors):
    ybar = Y[neighbors].mean(axis=1)
    yhat1 = np.where(A == 1, Y, ybar)
    yhat0 = np.where(A == 0, Y, ybar)
    return yhat1, yhat0


# ---------------------------------------------------------------------------
# Point estimators
# ---------------------------------------------------------------------------

def tau_point(data, fit: NuisanceFit, kind: EstimatorKind) -> float:
    """ACE point estimate of the requested kind on complete data."""
    A, Y, X = as_complete(data)
    if kind.tag == "regression":
        return float(np.mean(fit.mu1_hat - fit.mu0_hat))
    if kind.tag == "ipw":
        e = fit.ehat
        return float(np.mean(A * Y / e - (1 - A) * Y / (1 - e)))
    if kind.tag == "aipw":
        e = fit.ehat
        m1, m0 = fit.mu1_hat, fit.mu0_hat
        t1 = A * Y / e + (1 - A / e) * m1
        t0 = (1 - A) * Y / (1 - e) + (1 - (1 - A) / (1 - e)) * m0
        return float(np.mean(t1 - t0))
    if kind.tag == "matching":
        neighbors, _ = match_neighbors(match_variable(X, fit, kind), A, kind.M)
        yhat1, yhat0 = _matching_potentials(A, Y, neighbors)
        return float(np.mean(yhat1 - yhat0))
    raise ValueError(f"unknown estimator tag: {kind.tag!r}")


# ---------------------------------------------------------------------------
# Influence functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExpectationTerms:
    """Plug-in estimates of the population expectations inside psi.

    All terms are sample means over the dataset they were computed on,
    evaluated at the fitted parameters; freezing them turns psi into a
    fixed per-row function (dataset-global for matching).
    """

    E_mu_dot1: np.ndarray = None        # (p+1,)
    E_mu_dot0: np.ndarray = None
    E_S_dot1_inv: np.ndarray = None     # inverse of E(dS_a / dbeta'), (p+1, p+1)
    E_S_dot0_inv: np.ndarray = None
    sigma_alpha_inv: np.ndarray = None  # inverse Fisher matrix for alpha
    ipw_bracket1: np.ndarray = None     # E[{A Y / e^2} e_dot]
    ipw_bracket0: np.ndarray = None     # E[{(1-A) Y / (1-e)^2} e_dot]
    aipw_bracket1: np.ndarray = None    # E[{A (Y - mu1) / e^2} e_dot]
    aipw_bracket0: np.ndarray = None    # E[{(1-A)(Y - mu0) / (1-e)^2} e_dot]
    aipw_mu1: np.ndarray = None         # E[(1 - A / e) mu_dot1]
    aipw_mu0: np.ndarray = None         # E[(1 - (1-A)/(1-e)) mu_dot0]


def _outcome_scores(A, X, Y, fit):
    """Arm-wise estimating-function rows S_a,i = 1{A=a} w (Y - w'beta_a)."""
    W = design(X)
    r1 = (A == 1) * (Y - W @ fit.beta1_hat)
    r0 = (A == 0) * (Y - W @ fit.beta0_hat)
    return W * r1[:, None], W * r0[:, None]


def _propensity_parts(A, X, fit):
    Wp = fit.propensity_design(X)
    t = Wp @ fit.alpha_hat
    e = fit.propensity(X)
    phi = np.exp(-0.5 * t * t - _LOG_SQRT_2PI)
    e_dot = Wp * phi[:, None]
    S = probit_score_matrix(fit.alpha_hat, Wp, A)
    return e, e_dot, S, Wp, phi, t


def expectation_terms(data, fit: NuisanceFit, kind: EstimatorKind) -> ExpectationTerms:
    """Compute the expectation terms needed by psi for ``kind``."""
    A, Y, X = as_complete(data)
    n = len(A)
    W = design(X)
    fields = {}

    if kind.tag in ("regression", "aipw", "matching"):
        # E(S_dot_a) = -(1/n) sum 1{A=a} w w'
        W1 = W[A == 1]
        W0 = W[A == 0]
        fields["E_S_dot1_inv"] = np.linalg.inv(-(W1.T @ W1) / n)
        fields["E_S_dot0_inv"] = np.linalg.inv(-(W0.T @ W0) / n)
        fields["E_mu_dot1"] = W.mean(axis=0)
        fields["E_mu_dot0"] = W.mean(axis=0)

    if kind.tag in ("ipw", "aipw"):
        e, e_dot, _, Wp, phi, t = _propensity_parts(A, X, fit)
        denom = ndtr(t) * ndtr(-t)
        sigma_alpha = (Wp * (phi ** 2 / denom)[:, None]).T @ Wp / n
        fields["sigma_alpha_inv"] = np.linalg.inv(sigma_alpha)
        if kind.tag == "ipw":
            fields["ipw_bracket1"] = (e_dot * (A * Y / e ** 2)[:, None]).mean(axis=0)
            fields["ipw_bracket0"] = (
                e_dot * ((1 - A) * Y / (1 - e) ** 2)[:, None]).mean(axis=0)
        else:
            m1, m0 = W @ fit.beta1_hat, W @ fit.beta0_hat
            fields["aipw_bracket1"] = (
                e_dot * (A * (Y - m1) / e ** 2)[:, None]).mean(axis=0)
            fields["aipw_bracket0"] = (
                e_dot * ((1 - A) * (Y - m0) / (1 - e) ** 2)[:, None]).mean(axis=0)
            fields["aipw_mu1"] = (W * (1 - A / e)[:, None]).mean(axis=0)
            fields["aipw_mu0"] = (
                W * (1 - (1 - A) / (1 - e))[:, None]).mean(axis=0)
    return ExpectationTerms(**fields)


def _arm_psi(A, X, Y, fit, terms, kind: EstimatorKind):
    """Per-unit influence rows for the two arm means (E{Y(1)}, E{Y(0)}).

    The ACE influence function is their difference. Matching requires
    the dataset-global neighbor structure and is handled here as well.
    """
    A = np.asarray(A)
    X = np.atleast_2d(X)
    Y = np.asarray(Y)
    W = design(X)
    if kind.tag == "regression":
        S1, S0 = _outcome_scores(A, X, Y, fit)
        psi1 = W @ fit.beta1_hat - S1 @ (terms.E_S_dot1_inv.T @ terms.E_mu_dot1)
        psi0 = W @ fit.beta0_hat - S0 @ (terms.E_S_dot0_inv.T @ terms.E_mu_dot0)
        return psi1, psi0
    if kind.tag == "ipw":
        e = fit.propensity(X)
        S = probit_score_matrix(fit.alpha_hat, fit.propensity_design(X), A)
        corr1 = S @ (terms.sigma_alpha_inv @ terms.ipw_bracket1)
        corr0 = S @ (terms.sigma_alpha_inv @ terms.ipw_bracket0)
        psi1 = A * Y / e - corr1
        psi0 = (1 - A) * Y / (1 - e) + corr0
        return psi1, psi0
    if kind.tag == "aipw":
        e = fit.propensity(X)
        m1, m0 = W @ fit.beta1_hat, W @ fit.beta0_hat
        S = probit_score_matrix(fit.alpha_hat, fit.propensity_design(X), A)
        S1, S0 = _outcome_scores(A, X, Y, fit)
        psi1 = (A * Y / e + (1 - A / e) * m1
                + S @ (terms.sigma_alpha_inv @ terms.aipw_bracket1)
                - S1 @ (terms.E_S_dot1_inv.T @ terms.aipw_mu1))
        psi0 = ((1 - A) * Y / (1 - e) + (1 - (1 - A) / (1 - e)) * m0
                - S @ (terms.sigma_alpha_inv @ terms.aipw_bracket0)
                + S0 @ (terms.E_S_dot0_inv.T @ terms.aipw_mu0))
        return psi1, psi0
    if kind.tag == "matching":
        _, K = match_neighbors(match_variable(X, fit, kind), A, kind.M)
        m1, m0 = W @ fit.beta1_hat, W @ fit.beta0_hat
        w = 1.0 + K / kind.M
        psi1 = m1 + A * w * (Y - m1)
        psi0 = m0 + (1 - A) * w * (Y - m0)
        return psi1, psi0
    raise ValueError(f"unknown estimator tag: {kind.tag!r}")


def psi_values(A, X, Y, fit, terms, kind: EstimatorKind) -> np.ndarray:
    """Evaluate the ACE influence function row-wise on arbitrary data.

    ``fit`` and ``terms`` act as frozen plug-ins: nothing is refit here.
    For matching the neighbor sets and K_M are recomputed from the data
    passed in (psi_mat is dataset-global).
    """
    psi1, psi0 = _arm_psi(A, X, Y, fit, terms, kind)
    return psi1 - psi0


@dataclass(frozen=True)
class InfluenceVector:
    kind: EstimatorKind
    psi: np.ndarray
    tau_hat: float
    expectation_terms: ExpectationTerms = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return len(self.psi)


def influence(data, fit: NuisanceFit, kind: EstimatorKind) -> InfluenceVector:
    """Per-unit influence values for ``kind`` with plug-in expectations.

    ``tau_hat`` is mean(psi). For regression/IPW/AIPW this equals the
    point estimator exactly; for matching it differs from tau_point by
    the matching-discrepancy term (the fitted-mu bias estimate), which
    vanishes asymptotically.
    """
    A, Y, X = as_complete(data)
    terms = expectation_terms(data, fit, kind)
    psi = psi_values(A, X, Y, fit, terms, kind)
    return InfluenceVector(kind=kind, psi=psi, tau_hat=float(psi.mean()),
                           expectation_terms=terms)


def full_sample_variance(iv: InfluenceVector) -> float:
    """Influence-based variance estimate n^{-2} sum (psi_i - mean)^2."""
    c = iv.psi - iv.psi.mean()
    return float(c @ c) / iv.n ** 2


# ---------------------------------------------------------------------------
# Ratio estimands (binary outcome)
# ---------------------------------------------------------------------------

def _arm_mean_estimates(A, Y, X, fit, kind: EstimatorKind):
    if kind.tag == "regression":
        return float(fit.mu1_hat.mean()), float(fit.mu0_hat.mean())
    if kind.tag == "ipw":
        e = fit.ehat
        return float(np.mean(A * Y / e)), float(np.mean((1 - A) * Y / (1 - e)))
    if kind.tag == "aipw":
        e = fit.ehat
        m1h = np.mean(A * Y / e + (1 - A / e) * fit.mu1_hat)
        m0h = np.mean((1 - A) * Y / (1 - e) + (1 - (1 - A) / (1 - e)) * fit.mu0_hat)
        return float(m1h), float(m0h)
    if kind.tag == "matching":
        neighbors, _ = match_neighbors(match_variable(X, fit, kind), A, kind.M)
        yhat1, yhat0 = _matching_potentials(A, Y, neighbors)
        return float(yhat1.mean()), float(yhat0.mean())
    raise ValueError(f"unknown estimator tag: {kind.tag!r}")


def ratio_estimand(data, fit: NuisanceFit, kind: EstimatorKind, which: str):
    """Log causal risk ratio or log causal odds ratio with influence values.

    Requires a binary outcome and arm-mean estimates strictly inside
    (0, 1). Returns (point, psi) where the per-unit values are the
    delta-method linearization centered at the point.
    """
    A, Y, X = as_complete(data)
    if not np.isin(Y, (0, 1)).all():
        raise EstimationError("ratio estimands require a binary outcome")
    if which not in ("logCRR", "logCOR"):
        raise ValueError(f"unknown ratio estimand: {which!r}")
    m1, m0 = _arm_mean_estimates(A, Y, X, fit, kind)
    if not (0.0 < m1 < 1.0 and 0.0 < m0 < 1.0):
        raise EstimationError(f"boundary estimate: E{{Y(1)}}={m1:.4f}, E{{Y(0)}}={m0:.4f}")

    terms = expectation_terms(data, fit, kind)
    psi1, psi0 = _arm_psi(A, X, Y, fit, terms, kind)
    if which == "logCRR":
        point = np.log(m1 / m0)
        g1, g0 = 1.0 / m1, 1.0 / m0
    else:
        point = np.log(m1 / (1 - m1)) - np.log(m0 / (1 - m0))
        g1, g0 = 1.0 / (m1 * (1 - m1)), 1.0 / (m0 * (1 - m0))
    psi = point + g1 * (psi1 - psi1.mean()) - g0 * (psi0 - psi0.mean())
    return float(point), psi
