"""Martingale difference arrays and the weighted (wild) bootstrap.

The MI estimator admits a martingale representation with n + n*m terms:
the first n reflect parameter uncertainty through the conditional mean
of the influence function plus a mean-score correction, and the n*m
imputation terms are the centered per-imputation influence values. The
bootstrap multiplies the estimated arrays by i.i.d. mean-zero
unit-variance weights and reads the variance off the replicates, which
stays consistent for matching where the naive resampling bootstrap
fails.

Plug-in convention: the nuisance parameters and expectation terms
inside psi are fit once on the m stacked imputed datasets and frozen
across the imputation block, the conditional means, and the Gamma
estimate, so that psi acts as a fixed functional; parameter noise is
carried by the mean-score term instead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .data_model import CompleteArrays, EstimatorKind, ObservedDataset
from .errors import EstimationError
from .estimators import expectation_terms, fit_nuisance, psi_values
from .imputer import (Completions, GibbsChain, JointModelSpec, ThetaLayout,
                      ThetaParams, complete_data_scores, draw_completions)

SQRT5 = np.sqrt(5.0)
MAMMEN_LOW = (1.0 - SQRT5) / 2.0
MAMMEN_HIGH = (SQRT5 + 1.0) / 2.0
MAMMEN_P_LOW = (1.0 + 1.0 / SQRT5) / 2.0

WEIGHT_SCHEMES = ("mammen", "rademacher", "normal", "multinomial")


@dataclass(frozen=True)
class WeightScheme:
    tag: str

    def __post_init__(self):
        if self.tag not in WEIGHT_SCHEMES:
            raise ValueError(f"unknown weight scheme {self.tag!r}")


MAMMEN = WeightScheme("mammen")
RADEMACHER = WeightScheme("rademacher")
NORMAL = WeightScheme("normal")
MULTINOMIAL = WeightScheme("multinomial")


def draw_weights(scheme: WeightScheme, count: int, rng,
                 size: Optional[int] = None) -> np.ndarray:
    """Draw one weight vector (or ``size`` of them, rows) per the scheme.

    All schemes satisfy E(u) = 0 and E(u^2) = 1 (the multinomial scheme
    after its centering/scaling transform, exactly up to 1/count); the
    multinomial rows additionally sum to zero exactly.
    """
    shape = (count,) if size is None else (size, count)
    if scheme.tag == "mammen":
        low = rng.random(shape) < MAMMEN_P_LOW
        return np.where(low, MAMMEN_LOW, MAMMEN_HIGH)
    if scheme.tag == "rademacher":
        return np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    if scheme.tag == "normal":
        return rng.standard_normal(shape)
    # Nonparametric-bootstrap weights: W ~ Multinomial(count, equal cells)
    # centered at its mean (identically 1) and standardized by
    # sd(W_k) = sqrt(1 - 1/count), so E(u^2) = 1 exactly.
    W = rng.multinomial(count, np.full(count, 1.0 / count), size=size)
    return (W - 1.0) / np.sqrt(1.0 - 1.0 / count)


# ---------------------------------------------------------------------------
# Observed-data information
# ---------------------------------------------------------------------------

def obs_information(chain: GibbsChain) -> np.ndarray:
    """I_obs^{-1} from the posterior chain: n x cov(retained draws).

    Justified by the Bernstein-von Mises normal approximation of the
    posterior. Raises when the symmetrized result is not positive
    definite (e.g. a degenerate chain).
    """
    if chain.retained < 200:
        raise EstimationError("need >= 200 retained draws for the chain "
                              "covariance information estimate")
    cov = np.cov(chain.thetas, rowvar=False)
    inv = chain.data.n * np.atleast_2d(cov)
    inv = (inv + inv.T) / 2.0
    eig = np.linalg.eigvalsh(inv)
    if eig.min() <= 0:
        raise EstimationError(
            f"information not positive-definite (eigenvalues {eig})")
    return inv


def mean_scores(data: ObservedDataset, theta: ThetaParams, spec: JointModelSpec,
                completions: Completions, layout: ThetaLayout = None):
    """Per-unit mean scores and per-completion scores.

    Returns (mean_scores (n, d), score_draws (n_inc, L, d), inc_idx).
    Fully observed rows carry their exact complete-data score.
    """
    if layout is None:
        layout = ThetaLayout(spec.p, spec)
    n = data.n
    inc = ~data.fully_observed
    inc_idx = np.nonzero(inc)[0]
    out = np.zeros((n, layout.dim))

    comp_idx = np.nonzero(~inc)[0]
    if comp_idx.size:
        out[comp_idx] = complete_data_scores(
            theta, spec, data.A[comp_idx], data.X[comp_idx], data.Y[comp_idx],
            data.R[comp_idx], data.R_Y[comp_idx], layout)

    L = completions.L
    if inc_idx.size:
        # Stack all L completions of the incomplete rows into one call.
        A_rep = np.tile(data.A[inc_idx], L)
        R_rep = np.tile(data.R[inc_idx], (L, 1))
        RY_rep = np.tile(data.R_Y[inc_idx], L)
        X_rep = np.empty((L * inc_idx.size, data.p))
        Y_rep = np.empty(L * inc_idx.size)
        for l in range(L):
            Xl, Yl = completions.completed(l)
            X_rep[l * inc_idx.size:(l + 1) * inc_idx.size] = Xl[inc_idx]
            Y_rep[l * inc_idx.size:(l + 1) * inc_idx.size] = Yl[inc_idx]
        S = complete_data_scores(theta, spec, A_rep, X_rep, Y_rep, R_rep, RY_rep,
                                 layout)
        score_draws = S.reshape(L, inc_idx.size, layout.dim).transpose(1, 0, 2)
        out[inc_idx] = score_draws.mean(axis=1)
    else:
        score_draws = np.zeros((0, L, layout.dim))
    return out, score_draws, inc_idx


def mean_score(data: ObservedDataset, unit: int, theta: ThetaParams,
               spec: JointModelSpec, L: int, rng) -> np.ndarray:
    """Mean score of one unit: the complete-data score averaged over L
    predictive completions (exact when the row is fully observed)."""
    layout = ThetaLayout(spec.p, spec)
    if data.fully_observed[unit]:
        return complete_data_scores(
            theta, spec, data.A[unit:unit + 1], data.X[unit:unit + 1],
            data.Y[unit:unit + 1], data.R[unit:unit + 1],
            data.R_Y[unit:unit + 1], layout)[0]
    from .imputer import predictive_conditional
    X_rows, Y_vals = predictive_conditional(data, unit, theta, spec, L, rng)
    A_rep = np.full(L, data.A[unit])
    R_rep = np.tile(data.R[unit], (L, 1))
    RY_rep = np.full(L, data.R_Y[unit])
    S = complete_data_scores(theta, spec, A_rep, X_rows, Y_vals, R_rep, RY_rep,
                             layout)
    return S.mean(axis=0)


def obs_information_numeric(data: ObservedDataset, theta: ThetaParams,
                            spec: JointModelSpec, L: int, seed: int,
                            step_scale: float = 1e-5,
                            sweeps: int = 32) -> np.ndarray:
    """Fallback I_obs^{-1}: invert the negative Jacobian of the averaged
    mean score, by central differences with common random numbers.

    The completion sampler is re-seeded identically for every perturbed
    evaluation, so the Monte Carlo paths vary smoothly with theta and
    the difference quotients stay stable at small steps.
    """
    layout = ThetaLayout(spec.p, spec)
    v0 = layout.pack(theta)
    d = layout.dim

    def avg_mean_score(v):
        th = layout.unpack(v)
        rng = np.random.default_rng(seed)
        comp = draw_completions(data, th, spec, L, rng, sweeps=sweeps)
        ms, _, _ = mean_scores(data, th, spec, comp, layout)
        return ms.mean(axis=0)

    J = np.empty((d, d))
    for c in range(d):
        h = step_scale * (1.0 + abs(v0[c]))
        vp = v0.copy()
        vp[c] += h
        vm = v0.copy()
        vm[c] -= h
        J[:, c] = (avg_mean_score(vp) - avg_mean_score(vm)) / (2.0 * h)
    info = -(J + J.T) / 2.0
    eig = np.linalg.eigvalsh(info)
    if eig.min() <= 0:
        raise EstimationError(
            f"information not positive-definite (eigenvalues {eig})")
    return np.linalg.inv(info)


# ---------------------------------------------------------------------------
# Martingale arrays
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MartingaleArrays:
    """Estimated martingale difference arrays for one estimator kind."""

    xi_obs: np.ndarray          # (n,)
    xi_imp: np.ndarray          # (n, m)
    gamma_hat: np.ndarray       # (d,)
    I_obs_inv: np.ndarray       # (d, d)
    mean_scores: np.ndarray = field(repr=False, default=None)   # (n, d)
    cond_psi: np.ndarray = field(repr=False, default=None)      # (n,)
    L: int = 0
    kind: EstimatorKind = None
    tau_center: float = 0.0

    @property
    def n(self) -> int:
        return self.xi_obs.shape[0]

    @property
    def m(self) -> int:
        return self.xi_imp.shape[1]

    def flat(self) -> np.ndarray:
        """All n + n*m array entries, observation block first."""
        return np.concatenate([self.xi_obs, self.xi_imp.ravel()])


@dataclass
class PredictiveState:
    """Everything at theta_hat that does not depend on the imputations:
    the L predictive completions, the per-unit (mean) scores, and
    I_obs^{-1}. Reusable across imputation counts and estimator kinds."""

    data: ObservedDataset
    theta_hat: ThetaParams
    spec: JointModelSpec
    L: int
    layout: ThetaLayout
    completions: Completions
    mean_scores: np.ndarray
    score_draws: np.ndarray
    inc_idx: np.ndarray
    I_obs_inv: np.ndarray

    @classmethod
    def create(cls, data: ObservedDataset, theta_hat: ThetaParams,
               spec: JointModelSpec, L: int, rng, information,
               sweeps: int = 32) -> "PredictiveState":
        layout = ThetaLayout(spec.p, spec)
        completions = draw_completions(data, theta_hat, spec, L, rng,
                                       sweeps=sweeps)
        ms, draws, inc_idx = mean_scores(data, theta_hat, spec, completions,
                                         layout)
        if isinstance(information, GibbsChain):
            I_inv = obs_information(information)
        else:
            I_inv = np.atleast_2d(np.asarray(information, dtype=float))
        if I_inv.shape != (layout.dim, layout.dim):
            raise ValueError("information matrix has the wrong dimension")
        return cls(data=data, theta_hat=theta_hat, spec=spec, L=L,
                   layout=layout, completions=completions, mean_scores=ms,
                   score_draws=draws, inc_idx=inc_idx, I_obs_inv=I_inv)


class ArraysWorkspace:
    """Array builder for one imputation list, sharing a PredictiveState.

    Holds the frozen plug-ins: the nuisance fit on the m stacked imputed
    datasets and (per kind) the stack-averaged expectation terms.
    """

    def __init__(self, state: PredictiveState, imputed):
        self.state = state
        self.data = state.data
        self.imputed = list(imputed)
        self.L = state.L
        self.layout = state.layout
        self.completions = state.completions
        self.mean_scores = state.mean_scores
        self.score_draws = state.score_draws
        self.inc_idx = state.inc_idx
        self.I_obs_inv = state.I_obs_inv

        m = len(self.imputed)
        A_s = np.tile(self.data.A, m)
        X_s = np.vstack([ds.Xstar for ds in self.imputed])
        Y_s = np.concatenate([ds.Ystar for ds in self.imputed])
        self.stack = CompleteArrays(A=A_s, Y=Y_s, X=X_s)
        self.stacked_fit = fit_nuisance(self.stack)

    def terms_for(self, kind: EstimatorKind):
        return expectation_terms(self.stack, self.stacked_fit, kind)

    def _psi_draws(self, kind, terms):
        """cond_psi (n,) and per-completion psi for incomplete rows
        (n_inc, L); for matching the psi of every row varies with the
        completion, so the full (n, L) matrix is reduced on the fly."""
        data = self.data
        n = data.n
        L = self.L
        inc_idx = self.inc_idx
        cond_psi = np.zeros(n)
        if kind.tag != "matching":
            comp_idx = np.setdiff1d(np.arange(n), inc_idx)
            if comp_idx.size:
                cond_psi[comp_idx] = psi_values(
                    data.A[comp_idx], data.X[comp_idx], data.Y[comp_idx],
                    self.stacked_fit, terms, kind)
            if inc_idx.size:
                A_rep = np.tile(data.A[inc_idx], L)
                X_rep = np.empty((L * inc_idx.size, data.p))
                Y_rep = np.empty(L * inc_idx.size)
                for l in range(L):
                    Xl, Yl = self.completions.completed(l)
                    X_rep[l * inc_idx.size:(l + 1) * inc_idx.size] = Xl[inc_idx]
                    Y_rep[l * inc_idx.size:(l + 1) * inc_idx.size] = Yl[inc_idx]
                vals = psi_values(A_rep, X_rep, Y_rep, self.stacked_fit, terms,
                                  kind)
                draws = vals.reshape(L, inc_idx.size).T    # (n_inc, L)
                cond_psi[inc_idx] = draws.mean(axis=1)
            else:
                draws = np.zeros((0, L))
            return cond_psi, draws
        # Matching: recompute the neighbor structure per completion.
        if inc_idx.size == 0:
            # Degenerate completions: one evaluation, exact.
            vals = psi_values(data.A, data.X, data.Y, self.stacked_fit, terms,
                              kind)
            return vals, np.zeros((0, L))
        acc = np.zeros(n)
        draws = np.empty((inc_idx.size, L))
        for l in range(L):
            Xl, Yl = self.completions.completed(l)
            vals = psi_values(data.A, Xl, Yl, self.stacked_fit, terms, kind)
            acc += vals
            draws[:, l] = vals[inc_idx]
        return acc / L, draws

    def arrays(self, kind: EstimatorKind,
               tau_center: Optional[float] = None) -> MartingaleArrays:
        data = self.data
        n = data.n
        m = len(self.imputed)
        terms = self.terms_for(kind)
        cond_psi, psi_draws = self._psi_draws(kind, terms)

        # Gamma: averaged conditional covariance of (psi, score); fully
        # observed rows contribute exactly zero and are skipped.
        d = self.layout.dim
        gamma = np.zeros(d)
        if self.inc_idx.size:
            cross = np.einsum("il,ild->d", psi_draws, self.score_draws) / self.L
            centers = np.einsum("i,id->d", cond_psi[self.inc_idx],
                                self.mean_scores[self.inc_idx])
            gamma = (cross - centers) / n

        tau = float(cond_psi.mean()) if tau_center is None else float(tau_center)
        corr = self.mean_scores @ (self.I_obs_inv @ gamma)
        xi_obs = (cond_psi - tau + corr) / np.sqrt(n)

        xi_imp = np.empty((n, m))
        for j, ds in enumerate(self.imputed):
            vals = psi_values(data.A, ds.Xstar, ds.Ystar, self.stacked_fit,
                              terms, kind)
            xi_imp[:, j] = (vals - cond_psi) / (np.sqrt(n) * m)

        return MartingaleArrays(
            xi_obs=xi_obs, xi_imp=xi_imp, gamma_hat=gamma,
            I_obs_inv=self.I_obs_inv, mean_scores=self.mean_scores,
            cond_psi=cond_psi, L=self.L, kind=kind, tau_center=tau)


def gamma_hat(data, theta_hat, spec, kind, L, rng, imputed=None,
              information=None) -> np.ndarray:
    """Standalone Gamma estimate (row vector over theta components)."""
    if imputed is None:
        raise ValueError("gamma_hat requires the imputed datasets for the "
                         "frozen plug-in fit")
    info = information if information is not None else np.eye(
        ThetaLayout(spec.p, spec).dim)
    state = PredictiveState.create(data, theta_hat, spec, L, rng, info)
    return ArraysWorkspace(state, imputed).arrays(kind).gamma_hat


def build_arrays(data: ObservedDataset, imputed, theta_hat: ThetaParams,
                 spec: JointModelSpec, kind: EstimatorKind, L: int, rng,
                 information, sweeps: int = 32,
                 tau_center: Optional[float] = None) -> MartingaleArrays:
    """Construct the estimated martingale difference arrays.

    ``information`` is either the GibbsChain (chain-covariance estimate
    of I_obs^{-1}) or a precomputed matrix. ``tau_center`` overrides the
    default centering at mean(cond_psi) (e.g. with tau_MI).
    """
    state = PredictiveState.create(data, theta_hat, spec, L, rng, information,
                                   sweeps=sweeps)
    return ArraysWorkspace(state, imputed).arrays(kind, tau_center=tau_center)


# ---------------------------------------------------------------------------
# The bootstrap
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapResult:
    V_BS: float
    replicates: np.ndarray


def bootstrap(arrays: MartingaleArrays, scheme: WeightScheme, B: int,
              rng) -> BootstrapResult:
    """B weighted-bootstrap replicates T* and their sample variance.

    T*_b = n^{-1/2} sum_k xi_k u_k^{(b)}; conditional on the arrays the
    replicates have mean zero exactly and variance n^{-1} sum xi_k^2.
    """
    if B < 2:
        raise ValueError("need B >= 2 bootstrap replicates")
    xi = arrays.flat()
    n = arrays.n
    K = xi.size
    reps = np.empty(B)
    block = max(1, min(B, int(2e7) // max(K, 1)))
    for start in range(0, B, block):
        b = min(block, B - start)
        U = draw_weights(scheme, K, rng, size=b)
        reps[start:start + b] = U @ xi / np.sqrt(n)
    V = float(np.var(reps, ddof=1))
    if V == 0.0:
        warnings.warn("degenerate bootstrap: all replicates equal; "
                      "intervals collapse to a point", RuntimeWarning)
    return BootstrapResult(V_BS=V, replicates=reps)


def bootstrap_ci(tau_mi: float, replicates: np.ndarray, V_BS: float,
                 level: float = 0.95, style: str = "wald"):
    """Quantile-based or Wald-type interval from the bootstrap output."""
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must lie in (0, 1)")
    if style == "quantile":
        if len(replicates) == 0:
            raise ValueError("quantile interval requires replicates")
        alpha = 1.0 - level
        q_lo, q_hi = np.quantile(replicates, [alpha / 2.0, 1.0 - alpha / 2.0])
        return tau_mi - float(q_hi), tau_mi - float(q_lo)
    if style == "wald":
        half = float(norm.ppf(0.5 + level / 2.0) * np.sqrt(V_BS))
        return tau_mi - half, tau_mi + half
    raise ValueError(f"unknown interval style {style!r}")
