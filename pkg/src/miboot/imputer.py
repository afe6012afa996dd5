"""Bayesian joint model, Gibbs sampler, and posterior-predictive imputation.

The joint model is x ~ N(mu_x, Sigma_x), a probit treatment model on
[1, x], arm-wise linear-Gaussian outcome models, and (under MNAR)
probit missingness models whose predictors may include the missing
coordinates themselves but never the outcome. All probit links admit
exact conjugate data augmentation through latent Gaussian utilities,
so the sampler needs no Metropolis tuning.

Under MAR the missingness factor drops out of both the imputation
conditional and the parameter posterior, so no missingness model is
carried at all.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr, ndtri

from .data_model import ImputedDataset, ObservedDataset, ThetaParams, validate
from .errors import ConfigError, GibbsError
from .estimators import probit_score_matrix

logger = logging.getLogger(__name__)

DIVERGENCE_BOUND = 1e6


# ---------------------------------------------------------------------------
# Specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorSpec:
    """Priors for the joint model.

    Normal(0, coef_variance) on every regression and probit coefficient,
    Gamma(shape, rate) on the outcome precisions, Normal(mu_mean,
    mu_variance I) on the covariate mean, and inverse-Wishart(sigma_x_df,
    sigma_x_scale) on the covariate covariance.
    """

    coef_variance: float = 100.0
    precision_shape: float = 0.01
    precision_rate: float = 0.01
    mu_mean: Optional[np.ndarray] = None        # default zeros(p)
    mu_variance: float = 100.0
    sigma_x_scale: Optional[np.ndarray] = None  # default identity
    sigma_x_df: Optional[float] = None          # default p + 2

    def __post_init__(self):
        for name in ("coef_variance", "precision_shape", "precision_rate",
                     "mu_variance"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")

    def resolved(self, p: int):
        mu0 = np.zeros(p) if self.mu_mean is None else np.asarray(self.mu_mean, float)
        scale = np.eye(p) if self.sigma_x_scale is None else np.asarray(
            self.sigma_x_scale, float)
        df = float(p + 2) if self.sigma_x_df is None else float(self.sigma_x_df)
        if df <= p - 1:
            raise ConfigError("sigma_x_df must exceed p - 1")
        return mu0, scale, df


def _canonical_terms(terms, p) -> tuple:
    """Order probit predictor terms as (const, A, X coords ascending, Y)."""
    seen = set()
    for t in terms:
        if t in ("const", "A", "Y"):
            seen.add(t)
        elif t.startswith("X") and t[1:].isdigit() and 0 <= int(t[1:]) < p:
            seen.add(t)
        else:
            raise ConfigError(f"unknown predictor term {t!r}")
    out = [t for t in ("const", "A") if t in seen]
    out.extend(f"X{c}" for c in sorted(int(t[1:]) for t in seen if t.startswith("X")))
    if "Y" in seen:
        out.append("Y")
    return tuple(out)


@dataclass(frozen=True)
class JointModelSpec:
    """Model structure for the Gibbs sampler.

    ``missingness_x`` maps a confounder index to the predictor terms of
    that coordinate's missingness probit (terms from {"const", "A",
    "X<j>", "Y"}); ``missingness_y`` gives the R_Y probit terms. Both
    enter the sampler only under the MNAR mechanism; under MAR they may
    be declared for bookkeeping but are ignored.
    """

    p: int
    mechanism: str = "mar"                      # "mar" | "mnar"
    missingness_x: dict = field(default_factory=dict)
    missingness_y: Optional[tuple] = None

    def __post_init__(self):
        if self.mechanism not in ("mar", "mnar"):
            raise ConfigError(f"unknown mechanism {self.mechanism!r}")
        canon = {int(k): _canonical_terms(v, self.p)
                 for k, v in self.missingness_x.items()}
        object.__setattr__(self, "missingness_x", canon)
        if self.missingness_y is not None:
            object.__setattr__(
                self, "missingness_y", _canonical_terms(self.missingness_y, self.p))
        prone = set(self.missingness_x)
        for k, terms in self.missingness_x.items():
            used = {int(t[1:]) for t in terms if t.startswith("X")}
            if self.mechanism == "mar" and (prone & used):
                raise ConfigError(
                    f"MAR missingness model for X{k} may not use missing "
                    f"coordinates {sorted(prone & used)}")
            if self.mechanism == "mnar" and "Y" in terms:
                raise ConfigError(
                    "outcome-independent MNAR missingness models may not use Y")
        if self.mechanism == "mnar" and self.missingness_y is not None \
                and "Y" in self.missingness_y:
            raise ConfigError("R_Y model may not depend on Y")

    @property
    def models_missingness(self) -> bool:
        return self.mechanism == "mnar"

    @classmethod
    def mar(cls, p: int) -> "JointModelSpec":
        return cls(p=p, mechanism="mar")

    @classmethod
    def for_dataset(cls, data: ObservedDataset, mechanism: str,
                    missingness_x=None, missingness_y=None) -> "JointModelSpec":
        """Default spec: one probit per missing-prone coordinate.

        Under MNAR the default predictor set is {const, A, all X}; the
        R_Y probit (when Y has missing values) defaults to the same.
        """
        if mechanism == "mar":
            return cls.mar(data.p)
        prone = [j for j in range(data.p) if (data.R[:, j] == 0).any()]
        full = ("const", "A") + tuple(f"X{j}" for j in range(data.p))
        mx = {j: full for j in prone} if missingness_x is None else missingness_x
        my = missingness_y
        if my is None and (data.R_Y == 0).any():
            my = full
        return cls(p=data.p, mechanism="mnar", missingness_x=mx, missingness_y=my)

    def check_against(self, data: ObservedDataset):
        if data.p != self.p:
            raise ConfigError(f"spec p={self.p} does not match data p={data.p}")
        if self.mechanism == "mnar":
            prone = {j for j in range(data.p) if (data.R[:, j] == 0).any()}
            unmodeled = prone - set(self.missingness_x)
            if unmodeled:
                raise ConfigError(
                    f"MNAR spec lacks missingness models for coordinates "
                    f"{sorted(unmodeled)}")
            if (data.R_Y == 0).any() and self.missingness_y is None:
                raise ConfigError("MNAR spec lacks a missingness model for Y")


@dataclass(frozen=True)
class GibbsConfig:
    iterations: int = 5000
    burn_in: int = 2000
    m: int = 5
    selection: str = "random"   # "random" (without replacement) | "spread"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigError("require 0 <= burn_in < iterations")
        if not 1 <= self.m <= self.iterations - self.burn_in:
            raise ConfigError("require 1 <= m <= iterations - burn_in")
        if self.selection not in ("random", "spread"):
            raise ConfigError(f"unknown selection {self.selection!r}")


# ---------------------------------------------------------------------------
# Parameter vector layout
# ---------------------------------------------------------------------------

class ThetaLayout:
    """Fixed packing of ThetaParams into a flat vector.

    Order: beta0, sigma0^2, beta1, sigma1^2, alpha, mu_x, vech(Sigma_x)
    (lower triangle, row-major), then each missingness probit's gamma in
    ascending coordinate order, then gamma_y. Variances (not SDs) are
    packed so the chain covariance matches the score parameterization.
    """

    def __init__(self, p: int, spec: JointModelSpec):
        self.p = p
        self.spec = spec
        q = p + 1
        names = []
        slices = {}
        pos = 0

        def block(name, size):
            nonlocal pos
            slices[name] = slice(pos, pos + size)
            names.extend(f"{name}[{i}]" for i in range(size))
            pos += size

        block("beta0", q)
        block("sigma0_sq", 1)
        block("beta1", q)
        block("sigma1_sq", 1)
        block("alpha", q)
        block("mu_x", p)
        block("vech_sigma_x", p * (p + 1) // 2)
        self.gamma_coords = tuple(sorted(spec.missingness_x)) \
            if spec.models_missingness else ()
        for k in self.gamma_coords:
            block(f"gamma_x{k}", len(spec.missingness_x[k]))
        self.has_gamma_y = spec.models_missingness and spec.missingness_y is not None
        if self.has_gamma_y:
            block("gamma_y", len(spec.missingness_y))
        self.slices = slices
        self.names = tuple(names)
        self.dim = pos
        self._tril = np.tril_indices(p)

    def pack(self, theta: ThetaParams) -> np.ndarray:
        return self.pack_parts(theta.beta0, theta.sigma0 ** 2, theta.beta1,
                               theta.sigma1 ** 2, theta.alpha, theta.mu_x,
                               theta.sigma_x, theta.gamma_x, theta.gamma_y)

    def pack_parts(self, beta0, s0_sq, beta1, s1_sq, alpha, mu_x, sigma_x,
                   gamma_x, gamma_y) -> np.ndarray:
        v = np.empty(self.dim)
        s = self.slices
        v[s["beta0"]] = beta0
        v[s["sigma0_sq"]] = s0_sq
        v[s["beta1"]] = beta1
        v[s["sigma1_sq"]] = s1_sq
        v[s["alpha"]] = alpha
        v[s["mu_x"]] = mu_x
        v[s["vech_sigma_x"]] = sigma_x[self._tril]
        for k in self.gamma_coords:
            v[s[f"gamma_x{k}"]] = gamma_x[k]
        if self.has_gamma_y:
            v[s["gamma_y"]] = gamma_y
        return v

    def unpack(self, v: np.ndarray) -> ThetaParams:
        s = self.slices
        p = self.p
        sig = np.zeros((p, p))
        sig[self._tril] = v[s["vech_sigma_x"]]
        sig = sig + np.tril(sig, -1).T
        return ThetaParams(
            beta0=v[s["beta0"]], beta1=v[s["beta1"]],
            sigma0=float(np.sqrt(v[s["sigma0_sq"]][0])),
            sigma1=float(np.sqrt(v[s["sigma1_sq"]][0])),
            alpha=v[s["alpha"]], mu_x=v[s["mu_x"]], sigma_x=sig,
            gamma_x={k: v[s[f"gamma_x{k}"]] for k in self.gamma_coords},
            gamma_y=v[s["gamma_y"]] if self.has_gamma_y else None,
        )


# ---------------------------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------------------------

def _trunc_std_normal(rng, mean, positive):
    """N(mean, 1) truncated to (0, inf) where positive else (-inf, 0).

    Uses the survival-function inverse for tail stability.
    """
    u = np.clip(rng.random(np.shape(mean)), 1e-16, 1.0 - 1e-16)
    mean = np.asarray(mean, dtype=float)
    pos = mean - ndtri(np.clip(u * ndtr(mean), 1e-300, 1.0))
    neg = mean + ndtri(np.clip(u * ndtr(-mean), 1e-300, 1.0))
    return np.where(positive, pos, neg)


def _solve_lower(C, b):
    return solve_triangular(C, b, lower=True, check_finite=False)


def _solve_upper(Ct, b):
    return solve_triangular(Ct, b, lower=False, check_finite=False)


def _draw_coef(rng, WtW, Wty, noise_var, prior_var):
    """Draw from N(Lam^-1 eta, Lam^-1) with Lam = W'W/s2 + I/v."""
    q = WtW.shape[0]
    lam = WtW / noise_var + np.eye(q) / prior_var
    eta = Wty / noise_var
    try:
        C = np.linalg.cholesky(lam)
    except np.linalg.LinAlgError as exc:
        raise GibbsError("non-SPD coefficient precision") from exc
    mean = _solve_upper(C.T, _solve_lower(C, eta))
    return mean + _solve_upper(C.T, rng.standard_normal(q))


def _inv_wishart(rng, df, scale, tril_low=None):
    """Inverse-Wishart(df, scale) draw via the Bartlett decomposition."""
    p = scale.shape[0]
    L = np.linalg.cholesky(np.linalg.inv(scale))
    A = np.zeros((p, p))
    diag = np.arange(p)
    A[diag, diag] = np.sqrt(rng.chisquare(df - diag))
    if p > 1:
        lower = tril_low if tril_low is not None else np.tril_indices(p, -1)
        A[lower] = rng.standard_normal(len(lower[0]))
    LA = L @ A
    W = LA @ LA.T
    sigma = np.linalg.inv(W)
    return (sigma + sigma.T) / 2.0


def _probit_design(terms, A, X, n):
    cols = []
    for t in terms:
        if t == "const":
            cols.append(np.ones(n))
        elif t == "A":
            cols.append(np.asarray(A, float))
        else:
            cols.append(X[:, int(t[1:])])
    return np.column_stack(cols)


def _x_coef_vector(terms, gamma, p):
    """Split a probit coefficient vector into (const, A, full-length X)."""
    c = np.zeros(p)
    c0 = 0.0
    ca = 0.0
    for t, g in zip(terms, gamma):
        if t == "const":
            c0 = float(g)
        elif t == "A":
            ca = float(g)
        else:
            c[int(t[1:])] = g
    return c0, ca, c


# ---------------------------------------------------------------------------
# Missing-data cells (shared by the chain and the predictive sampler)
# ---------------------------------------------------------------------------

@dataclass
class _Cell:
    units: np.ndarray     # unit indices, ascending
    m: np.ndarray         # missing X coords
    o: np.ndarray         # observed X coords
    arm: int
    y_obs: bool
    x_obs: np.ndarray     # (n_cell, |o|) fixed observed values


def _build_cells(data: ObservedDataset):
    """Group incomplete units by (missingness pattern, arm, Y observed)."""
    key = np.concatenate([data.R, data.R_Y[:, None], data.A[:, None]], axis=1)
    _, inverse = np.unique(key, axis=0, return_inverse=True)
    cells = []
    for g in np.unique(inverse):
        units = np.nonzero(inverse == g)[0]
        i0 = units[0]
        miss = np.nonzero(data.R[i0] == 0)[0]
        if miss.size == 0 and data.R_Y[i0] == 1:
            continue
        obs = np.nonzero(data.R[i0] == 1)[0]
        cells.append(_Cell(
            units=units, m=miss, o=obs, arm=int(data.A[i0]),
            y_obs=bool(data.R_Y[i0] == 1),
            x_obs=data.X[np.ix_(units, obs)].copy()))
    return cells


def _cell_probit_factors(cell: _Cell, spec: JointModelSpec, alpha,
                         gamma_x=None, gamma_y=None):
    """Probit likelihood factors of a cell's missing block.

    Each entry is (c_m, offset, response_key, truncate_positive) where
    c_m is the coefficient on the missing coordinates, offset the fixed
    per-unit linear part, and response_key names the utility array that
    supplies the Gaussian response.
    """
    out = []
    off = alpha[0] + cell.x_obs @ alpha[1 + cell.o]
    out.append((alpha[1 + cell.m], off, ("A", None), cell.arm == 1))
    if spec.models_missingness:
        for k in sorted(spec.missingness_x):
            c0, ca, cx = _x_coef_vector(spec.missingness_x[k], gamma_x[k],
                                        spec.p)
            off = c0 + ca * cell.arm + cell.x_obs @ cx[cell.o]
            observed = k not in cell.m
            out.append((cx[cell.m], off, ("RX", k), observed))
        if spec.missingness_y is not None:
            c0, ca, cx = _x_coef_vector(spec.missingness_y, gamma_y, spec.p)
            off = c0 + ca * cell.arm + cell.x_obs @ cx[cell.o]
            out.append((cx[cell.m], off, ("RY", None), cell.y_obs))
    return out


def _cell_precision(cell: _Cell, Q, coefs_vars):
    lam = Q[np.ix_(cell.m, cell.m)].copy()
    for c_m, var in coefs_vars:
        lam += np.outer(c_m, c_m) / var
    return lam


def _cell_prior_potential(cell: _Cell, Q, mu):
    """Gaussian-prior part of the potential: Q_mm mu_m - Q_mo (x_o - mu_o)."""
    eta = np.repeat((Q[np.ix_(cell.m, cell.m)] @ mu[cell.m])[:, None],
                    cell.units.size, axis=1)
    if cell.o.size:
        dev = cell.x_obs - mu[cell.o]
        eta = eta - Q[np.ix_(cell.m, cell.o)] @ dev.T
    return eta  # (|m|, n_cell)


# ---------------------------------------------------------------------------
# The Gibbs chain
# ---------------------------------------------------------------------------

@dataclass
class GibbsChain:
    """Retained posterior draws plus per-iteration missing-value states."""

    thetas: np.ndarray          # (retained, dim)
    missing_x: np.ndarray       # (retained, n_missing_x_entries)
    missing_y: np.ndarray       # (retained, n_missing_y)
    mx_units: np.ndarray
    mx_coords: np.ndarray
    my_units: np.ndarray
    layout: ThetaLayout
    spec: JointModelSpec
    prior: PriorSpec
    cfg: GibbsConfig
    data: ObservedDataset

    @property
    def retained(self) -> int:
        return self.thetas.shape[0]

    def theta_at(self, t: int) -> ThetaParams:
        return self.layout.unpack(self.thetas[t])

    def posterior_mean(self) -> ThetaParams:
        return self.layout.unpack(self.thetas.mean(axis=0))

    def posterior_sd(self) -> np.ndarray:
        return self.thetas.std(axis=0, ddof=1)

    def completed_at(self, t: int):
        """Completed (X, Y) arrays for retained iteration t."""
        X = self.data.X.copy()
        Y = self.data.Y.copy()
        X[self.mx_units, self.mx_coords] = self.missing_x[t]
        Y[self.my_units] = self.missing_y[t]
        return X, Y


def gibbs_run(data: ObservedDataset, spec: JointModelSpec, prior: PriorSpec,
              cfg: GibbsConfig) -> GibbsChain:
    """Run the data-augmentation Gibbs sampler.

    Sweep order within an iteration: latent utilities, outcome
    coefficients and variances, propensity coefficients, missingness
    coefficients, covariate mean and covariance, missing data. The order
    is fixed for reproducibility; identical inputs and seed produce a
    bitwise-identical chain.
    """
    report = validate(data)
    if not report.ok:
        raise ValueError("invalid dataset: " + "; ".join(report.violations))
    spec.check_against(data)

    n, p = data.n, data.p
    q = p + 1
    rng = np.random.default_rng(cfg.seed)
    layout = ThetaLayout(p, spec)
    mu0, sig_scale, sig_df = prior.resolved(p)
    v_coef = prior.coef_variance
    a0, b0 = prior.precision_shape, prior.precision_rate

    A = data.A
    mx_units, mx_coords = np.nonzero(data.R == 0)
    my_units = np.nonzero(data.R_Y == 0)[0]
    cells = _build_cells(data)
    gamma_coords = sorted(spec.missingness_x) if spec.models_missingness else []
    model_ry = spec.models_missingness and spec.missingness_y is not None

    # Working completed arrays; observed entries are never touched.
    Xw = data.X.copy()
    for j in range(p):
        obs = data.R[:, j] == 1
        Xw[~obs, j] = data.X[obs, j].mean()
    Yw = data.Y.copy()
    for a in (0, 1):
        sel = (A == a) & (data.R_Y == 0)
        if sel.any():
            obs = (A == a) & (data.R_Y == 1)
            Yw[sel] = data.Y[obs].mean() if obs.any() else data.Y[data.R_Y == 1].mean()

    # Deterministic warm start.
    W = np.column_stack([np.ones(n), Xw])
    beta = {}
    sigma_sq = {}
    for a in (0, 1):
        rows = A == a
        bh, *_ = np.linalg.lstsq(W[rows], Yw[rows], rcond=None)
        beta[a] = bh
        resid = Yw[rows] - W[rows] @ bh
        sigma_sq[a] = max(float(resid @ resid) / max(int(rows.sum()), 1), 1e-6)
    alpha = np.zeros(q)
    mu_x = Xw.mean(axis=0)
    dev = Xw - mu_x
    sigma_x = dev.T @ dev / n + 1e-6 * np.eye(p)
    gamma = {k: np.zeros(len(spec.missingness_x[k])) for k in gamma_coords}
    gamma_y = np.zeros(len(spec.missingness_y)) if model_ry else None

    n_keep = cfg.iterations - cfg.burn_in
    thetas = np.empty((n_keep, layout.dim))
    miss_x_states = np.empty((n_keep, mx_units.size))
    miss_y_states = np.empty((n_keep, my_units.size))

    # Per-cell constants reused every iteration.
    cell_ix = [np.ix_(c.units, c.m) for c in cells]
    arm_rows = {a: A == a for a in (0, 1)}
    tril_low = np.tril_indices(p, -1)
    eye_p = np.eye(p)
    W = np.empty((n, q))
    W[:, 0] = 1.0

    for it in range(cfg.iterations):
        W[:, 1:] = Xw

        # (i) latent utilities
        U = _trunc_std_normal(rng, W @ alpha, A == 1)
        V = {}
        gx_designs = {}
        Dy = None
        if spec.models_missingness:
            for k in gamma_coords:
                D = _probit_design(spec.missingness_x[k], A, Xw, n)
                gx_designs[k] = D
                V[k] = _trunc_std_normal(rng, D @ gamma[k], data.R[:, k] == 1)
            if model_ry:
                Dy = _probit_design(spec.missingness_y, A, Xw, n)
                V["__y__"] = _trunc_std_normal(rng, Dy @ gamma_y, data.R_Y == 1)

        # (ii) outcome coefficients and variances
        for a in (0, 1):
            rows = arm_rows[a]
            Wa = W[rows]
            ya = Yw[rows]
            beta[a] = _draw_coef(rng, Wa.T @ Wa, Wa.T @ ya, sigma_sq[a], v_coef)
            resid = ya - Wa @ beta[a]
            prec = rng.gamma(a0 + 0.5 * rows.sum(), 1.0 / (b0 + 0.5 * resid @ resid))
            sigma_sq[a] = 1.0 / prec

        # (iii) propensity coefficients (unit-variance regression on U)
        alpha = _draw_coef(rng, W.T @ W, W.T @ U, 1.0, v_coef)

        # (iv) missingness coefficients
        if spec.models_missingness:
            for k in gamma_coords:
                D = gx_designs[k]
                gamma[k] = _draw_coef(rng, D.T @ D, D.T @ V[k], 1.0, v_coef)
            if model_ry:
                gamma_y = _draw_coef(rng, Dy.T @ Dy, Dy.T @ V["__y__"], 1.0, v_coef)

        # (v) covariate mean and covariance
        Q = np.linalg.inv(sigma_x)
        lam_mu = n * Q + eye_p / prior.mu_variance
        eta_mu = Q @ Xw.sum(axis=0) + mu0 / prior.mu_variance
        C = np.linalg.cholesky(lam_mu)
        mu_x = _solve_upper(C.T, _solve_lower(C, eta_mu)) \
            + _solve_upper(C.T, rng.standard_normal(p))
        dev = Xw - mu_x
        try:
            sigma_x = _inv_wishart(rng, sig_df + n, sig_scale + dev.T @ dev,
                                   tril_low)
        except np.linalg.LinAlgError as exc:
            raise GibbsError("non-SPD covariate scatter", iteration=it) from exc
        Q = np.linalg.inv(sigma_x)

        packed = layout.pack_parts(beta[0], sigma_sq[0], beta[1], sigma_sq[1],
                                   alpha, mu_x, sigma_x, gamma, gamma_y)
        if np.abs(packed).max() > DIVERGENCE_BOUND:
            raise GibbsError("divergent chain", iteration=it)

        # (vi) missing data: X blocks from their Gaussian full conditionals
        # given the utilities, then Y | X, A for missing outcomes.
        for cell, ix in zip(cells, cell_ix):
            if not cell.m.size:
                continue
            ba = beta[cell.arm]
            s2 = sigma_sq[cell.arm]
            factors = _cell_probit_factors(cell, spec, alpha, gamma, gamma_y)
            coefs_vars = [(cm, 1.0) for cm, _, _, _ in factors]
            if cell.y_obs:
                coefs_vars.append((ba[1 + cell.m], s2))
            lam = _cell_precision(cell, Q, coefs_vars)
            eta = _cell_prior_potential(cell, Q, mu_x)
            for cm, off, resp, _ in factors:
                r = V[resp[1]] if resp[0] == "RX" else (
                    U if resp[0] == "A" else V["__y__"])
                eta = eta + np.outer(cm, r[cell.units] - off)
            if cell.y_obs:
                yres = data.Y[cell.units] - ba[0] - cell.x_obs @ ba[1 + cell.o]
                eta = eta + np.outer(ba[1 + cell.m] / s2, yres)
            try:
                C = np.linalg.cholesky(lam)
            except np.linalg.LinAlgError as exc:
                raise GibbsError("non-SPD conditional covariance",
                                 iteration=it) from exc
            mean = _solve_upper(C.T, _solve_lower(C, eta))
            draw = mean + _solve_upper(C.T, rng.standard_normal(mean.shape))
            Xw[ix] = draw.T
        if my_units.size:
            Wm = np.column_stack([np.ones(my_units.size), Xw[my_units]])
            am = A[my_units]
            mean_y = np.where(am == 1, Wm @ beta[1], Wm @ beta[0])
            sd_y = np.where(am == 1, np.sqrt(sigma_sq[1]), np.sqrt(sigma_sq[0]))
            Yw[my_units] = mean_y + sd_y * rng.standard_normal(my_units.size)

        t = it - cfg.burn_in
        if t >= 0:
            thetas[t] = packed
            miss_x_states[t] = Xw[mx_units, mx_coords]
            miss_y_states[t] = Yw[my_units]

    return GibbsChain(
        thetas=thetas, missing_x=miss_x_states, missing_y=miss_y_states,
        mx_units=mx_units, mx_coords=mx_coords, my_units=my_units,
        layout=layout, spec=spec, prior=prior, cfg=cfg, data=data)


# ---------------------------------------------------------------------------
# Multiple imputation
# ---------------------------------------------------------------------------

def select_draws(chain: GibbsChain, m: int, rng=None) -> np.ndarray:
    """Indices of the m retained iterations used for imputation.

    "random" selection samples distinct indices uniformly without
    replacement; "spread" takes evenly spaced indices (deterministic).
    """
    if m > chain.retained:
        raise ConfigError("m exceeds the number of retained draws")
    if chain.cfg.selection == "spread":
        return np.linspace(0, chain.retained - 1, m).round().astype(int)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([chain.cfg.seed, 0x5E1]))
    return np.sort(rng.choice(chain.retained, size=m, replace=False))


def impute_from_chain(chain: GibbsChain, m: int, rng=None):
    """Materialize m imputed datasets from retained chain states.

    Each selected iteration's (theta, missing-data) state is a joint
    posterior draw, so the stored missing values are posterior-predictive
    draws at that iteration's theta.
    """
    picks = select_draws(chain, m, rng)
    out = []
    for j, t in enumerate(picks, start=1):
        X, Y = chain.completed_at(t)
        out.append(ImputedDataset(base=chain.data, j=j, Xstar=X, Ystar=Y,
                                  theta_draw=chain.theta_at(t)))
    return out


def multiply_impute(data: ObservedDataset, spec: JointModelSpec,
                    prior: PriorSpec, cfg: GibbsConfig):
    """Step MI-1: run the sampler and return m completed datasets."""
    chain = gibbs_run(data, spec, prior, cfg)
    return impute_from_chain(chain, cfg.m)


# ---------------------------------------------------------------------------
# Predictive draws at a fixed theta
# ---------------------------------------------------------------------------

@dataclass
class Completions:
    """L posterior-predictive completions of a dataset at fixed theta."""

    x_draws: np.ndarray     # (L, n_missing_x_entries)
    y_draws: np.ndarray     # (L, n_missing_y)
    mx_units: np.ndarray
    mx_coords: np.ndarray
    my_units: np.ndarray
    base: ObservedDataset

    @property
    def L(self) -> int:
        return self.x_draws.shape[0]

    def completed(self, l: int):
        X = self.base.X.copy()
        Y = self.base.Y.copy()
        X[self.mx_units, self.mx_coords] = self.x_draws[l]
        Y[self.my_units] = self.y_draws[l]
        return X, Y


def draw_completions(data: ObservedDataset, theta: ThetaParams,
                     spec: JointModelSpec, L: int, rng,
                     sweeps: int = 32) -> Completions:
    """Draw L completions of every incomplete unit at fixed theta.

    Per cell, L parallel Gibbs sub-chains over (latent utilities,
    missing block) are advanced ``sweeps`` times, so the L draws come
    from independent chains. When no probit factor loads on a cell's
    missing coordinates the conditional is exactly Gaussian and a single
    exact draw is taken instead.
    """
    cells = _build_cells(data)
    mx_units, mx_coords = np.nonzero(data.R == 0)
    my_units = np.nonzero(data.R_Y == 0)[0]
    x_draws = np.empty((L, mx_units.size))
    y_draws = np.empty((L, my_units.size))

    flat_index = {(int(u), int(c)): i
                  for i, (u, c) in enumerate(zip(mx_units, mx_coords))}
    y_index = {int(u): i for i, u in enumerate(my_units)}
    Q = np.linalg.inv(theta.sigma_x)

    for cell in cells:
        nc = cell.units.size
        ba = theta.beta(cell.arm)
        s2 = theta.sigma(cell.arm) ** 2
        state = None
        if cell.m.size:
            factors = _cell_probit_factors(cell, spec, theta.alpha,
                                           theta.gamma_x, theta.gamma_y)
            active = [f for f in factors if np.any(f[0] != 0.0)]
            coefs_vars = [(f[0], 1.0) for f in active]
            if cell.y_obs:
                coefs_vars.append((ba[1 + cell.m], s2))
            lam = _cell_precision(cell, Q, coefs_vars)
            C = np.linalg.cholesky(lam)
            eta0 = _cell_prior_potential(cell, Q, theta.mu_x)  # (|m|, nc)
            if cell.y_obs:
                yres = data.Y[cell.units] - ba[0] - cell.x_obs @ ba[1 + cell.o]
                eta0 = eta0 + np.outer(ba[1 + cell.m] / s2, yres)

            n_sweeps = sweeps if active else 1
            # Init at the factor-free conditional mean; sub-chains forget
            # it within a few sweeps.
            mean0 = _solve_upper(C.T, _solve_lower(C, eta0))
            state = np.repeat(mean0[:, :, None], L, axis=2)  # (|m|, nc, L)
            for _ in range(n_sweeps):
                eta = np.repeat(eta0[:, :, None], L, axis=2)
                for cm, off, _, is_pos in active:
                    umean = off[:, None] + np.tensordot(cm, state, axes=(0, 0))
                    util = _trunc_std_normal(rng, umean, is_pos)
                    eta += cm[:, None, None] * (util - off[:, None])[None, :, :]
                flat = eta.reshape(cell.m.size, nc * L)
                mean = _solve_upper(C.T, _solve_lower(C, flat))
                draw = mean + _solve_upper(C.T, rng.standard_normal(mean.shape))
                state = draw.reshape(cell.m.size, nc, L)
            for mi, coord in enumerate(cell.m):
                colmap = [flat_index[(int(u), int(coord))] for u in cell.units]
                x_draws[:, colmap] = state[mi].T
        if not cell.y_obs:
            base_mean = (ba[0] + cell.x_obs @ ba[1 + cell.o])[:, None]
            if cell.m.size:
                mean_y = base_mean + np.tensordot(ba[1 + cell.m], state, axes=(0, 0))
            else:
                mean_y = np.broadcast_to(base_mean, (nc, L)).copy()
            yv = mean_y + np.sqrt(s2) * rng.standard_normal((nc, L))
            cols = [y_index[int(u)] for u in cell.units]
            y_draws[:, cols] = yv.T

    return Completions(x_draws=x_draws, y_draws=y_draws,
                       mx_units=mx_units, mx_coords=mx_coords,
                       my_units=my_units, base=data)


def predictive_conditional(data: ObservedDataset, unit: int, theta: ThetaParams,
                           spec: JointModelSpec, L: int, rng, sweeps: int = 32):
    """L completed copies of one unit's row at fixed theta.

    Returns (X_rows, Y_values) of shapes (L, p) and (L,). For a fully
    observed row the copies are exact duplicates.
    """
    row = ObservedDataset(
        A=data.A[unit:unit + 1], Y=data.Y[unit:unit + 1],
        X=data.X[unit:unit + 1], R=data.R[unit:unit + 1],
        R_Y=data.R_Y[unit:unit + 1])
    if row.is_complete:
        return np.repeat(row.X, L, axis=0), np.repeat(row.Y, L)
    comp = draw_completions(row, theta, spec, L, rng, sweeps=sweeps)
    X_rows = np.repeat(row.X, L, axis=0)
    Y_vals = np.repeat(row.Y, L)
    for i, (u, c) in enumerate(zip(comp.mx_units, comp.mx_coords)):
        X_rows[:, c] = comp.x_draws[:, i]
    if comp.my_units.size:
        Y_vals[:] = comp.y_draws[:, 0]
    return X_rows, Y_vals


# ---------------------------------------------------------------------------
# Complete-data scores
# ---------------------------------------------------------------------------

def complete_data_scores(theta: ThetaParams, spec: JointModelSpec,
                         A, X, Y, R, R_Y, layout: ThetaLayout = None) -> np.ndarray:
    """Per-unit score rows of the complete-data log likelihood at theta.

    Components follow the ThetaLayout packing (variances, not SDs, for
    the outcome noise blocks; off-diagonal Sigma_x entries carry the
    symmetric-perturbation factor 2).
    """
    if layout is None:
        layout = ThetaLayout(spec.p, spec)
    A = np.asarray(A)
    X = np.atleast_2d(X)
    Y = np.asarray(Y)
    n, p = X.shape
    W = np.column_stack([np.ones(n), X])
    out = np.zeros((n, layout.dim))
    s = layout.slices

    for a, (bname, sname) in ((0, ("beta0", "sigma0_sq")),
                              (1, ("beta1", "sigma1_sq"))):
        arm = (A == a).astype(float)
        beta = theta.beta(a)
        s2 = theta.sigma(a) ** 2
        resid = (Y - W @ beta) * arm
        out[:, s[bname]] = W * (resid / s2)[:, None]
        out[:, s[sname]] = (arm * (-0.5 / s2) + resid ** 2 / (2 * s2 ** 2))[:, None]

    out[:, s["alpha"]] = probit_score_matrix(theta.alpha, W, A)

    Q = np.linalg.inv(theta.sigma_x)
    D = X - theta.mu_x
    QD = D @ Q
    out[:, s["mu_x"]] = QD
    rows, cols = np.tril_indices(p)
    M = QD[:, rows] * QD[:, cols] - Q[rows, cols]
    M[:, rows == cols] *= 0.5
    out[:, s["vech_sigma_x"]] = M

    if spec.models_missingness:
        for k in sorted(spec.missingness_x):
            D_k = _probit_design(spec.missingness_x[k], A, X, n)
            out[:, s[f"gamma_x{k}"]] = probit_score_matrix(
                theta.gamma_x[k], D_k, np.asarray(R)[:, k])
        if spec.missingness_y is not None:
            D_y = _probit_design(spec.missingness_y, A, X, n)
            out[:, s["gamma_y"]] = probit_score_matrix(
                theta.gamma_y, D_y, np.asarray(R_Y))
    return out
