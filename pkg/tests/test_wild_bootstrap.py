import numpy as np
import pytest
from scipy.special import ndtr

from miboot.data_model import EstimatorKind, ObservedDataset, ThetaParams
from miboot.errors import EstimationError
from miboot.estimators import design, fit_nuisance, fit_probit, influence
from miboot.imputer import (GibbsConfig, JointModelSpec, PriorSpec, ThetaLayout,
                            complete_data_scores, draw_completions, gibbs_run,
                            impute_from_chain)
from miboot.sim_harness import ScenarioSpec, generate
from miboot.wild_bootstrap import (MAMMEN, MAMMEN_HIGH, MAMMEN_LOW,
                                   MAMMEN_P_LOW, ArraysWorkspace,
                                   PredictiveState, WeightScheme, bootstrap,
                                   bootstrap_ci, build_arrays, draw_weights,
                                   mean_score, obs_information,
                                   obs_information_numeric)

SCHEMES = [WeightScheme(t) for t in ("mammen", "rademacher", "normal",
                                     "multinomial")]


# ---------------------------------------------------------------------------
# Weight schemes
# ---------------------------------------------------------------------------

def test_mammen_two_point_moments_analytic():
    p = MAMMEN_P_LOW
    for k, expected in ((1, 0.0), (2, 1.0), (3, 1.0)):
        moment = p * MAMMEN_LOW ** k + (1 - p) * MAMMEN_HIGH ** k
        assert moment == pytest.approx(expected, abs=1e-12)


def test_weight_schemes_empirical_moments():
    rng = np.random.default_rng(0)
    N = 1_000_000
    for scheme in SCHEMES:
        u = draw_weights(scheme, N, rng)
        se_mean = u.std(ddof=1) / np.sqrt(N)
        assert abs(u.mean()) < 4 * se_mean + 1e-12, scheme.tag
        assert abs(u.var(ddof=1) - 1.0) < 4 * np.sqrt(2.0 / N) + 2e-3, scheme.tag


def test_rademacher_mean_small():
    rng = np.random.default_rng(1)
    u = draw_weights(WeightScheme("rademacher"), 1_000_000, rng)
    assert abs(u.mean()) < 4e-3


def test_multinomial_weights_sum_to_zero():
    # The centering identity sum(W - 1) = 0 is integer-exact; after the
    # float standardization the computed sum rounds at the 1e-16 scale.
    rng = np.random.default_rng(2)
    for count in (7, 120, 3001):
        u = draw_weights(WeightScheme("multinomial"), count, rng)
        assert abs(u.sum()) < 1e-9
    U = draw_weights(WeightScheme("multinomial"), 50, rng, size=64)
    assert np.abs(U.sum(axis=1)).max() < 1e-9


# ---------------------------------------------------------------------------
# Shared pipeline state for scenario (a)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline_a():
    spec = ScenarioSpec.make("a", n=600)
    data, shadow = generate(spec, np.random.default_rng(100))
    model = spec.analysis_model()
    cfg = GibbsConfig(iterations=900, burn_in=300, m=5, seed=17)
    chain = gibbs_run(data, model, PriorSpec(), cfg)
    imputed = impute_from_chain(chain, 5, np.random.default_rng(1))
    state = PredictiveState.create(data, chain.posterior_mean(), model, L=200,
                                   rng=np.random.default_rng(2),
                                   information=chain)
    return dict(spec=spec, data=data, shadow=shadow, model=model, chain=chain,
                imputed=imputed, state=state)


@pytest.fixture(scope="module")
def complete_pipeline():
    """Same machinery but on fully observed data (collapse checks)."""
    spec = ScenarioSpec.make("a", n=500)
    _, shadow = generate(spec, np.random.default_rng(200))
    model = JointModelSpec.mar(2)
    cfg = GibbsConfig(iterations=700, burn_in=300, m=4, seed=23)
    chain = gibbs_run(shadow, model, PriorSpec(), cfg)
    imputed = impute_from_chain(chain, 4, np.random.default_rng(3))
    state = PredictiveState.create(shadow, chain.posterior_mean(), model, L=50,
                                   rng=np.random.default_rng(4),
                                   information=chain)
    return dict(shadow=shadow, model=model, chain=chain, imputed=imputed,
                state=state)


# ---------------------------------------------------------------------------
# Observed-data information
# ---------------------------------------------------------------------------

def test_chain_information_gaussian_mean_block(complete_pipeline):
    # On complete data the per-unit information for the covariate mean
    # is Sigma_x^{-1} (textbook), so the I_obs^{-1} block should
    # approximate Sigma_x.
    chain = complete_pipeline["chain"]
    inv = obs_information(chain)
    sl = chain.layout.slices["mu_x"]
    sigma_hat = chain.posterior_mean().sigma_x
    block = inv[sl, sl]
    assert np.abs(block - sigma_hat).max() < 0.25 * np.abs(sigma_hat).max()


@pytest.mark.slow
def test_chain_information_matches_analytic_probit_block():
    spec = ScenarioSpec.make("a", n=3000)
    _, shadow = generate(spec, np.random.default_rng(300))
    model = JointModelSpec.mar(2)
    cfg = GibbsConfig(iterations=2500, burn_in=500, m=2, seed=31)
    chain = gibbs_run(shadow, model, PriorSpec(), cfg)
    inv = obs_information(chain)
    sl = chain.layout.slices["alpha"]
    block = inv[sl, sl]

    # Analytic Fisher matrix for the probit coefficients by explicit
    # summation at the MLE: (1/n) sum w w' phi(t)^2 / {Phi(t)(1-Phi(t))}.
    W = design(shadow.X)
    alpha = fit_probit(W, shadow.A)
    t = W @ alpha
    phi = np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi)
    wgt = phi ** 2 / (ndtr(t) * ndtr(-t))
    sigma_alpha = (W * wgt[:, None]).T @ W / shadow.n
    target = np.linalg.inv(sigma_alpha)
    gap = np.linalg.norm(block - target, 2) / np.linalg.norm(target, 2)
    assert gap < 0.10


def test_information_requires_long_chain(pipeline_a):
    import dataclasses
    chain = pipeline_a["chain"]
    short = dataclasses.replace(chain, thetas=chain.thetas[:100])
    with pytest.raises(EstimationError):
        obs_information(short)


@pytest.mark.slow
def test_information_methods_agree():
    # Dedicated long chain: the chain-covariance estimate of the
    # variance-block entries needs a few thousand retained draws before
    # its own Monte Carlo error drops under the comparison band.
    spec = ScenarioSpec.make("a", n=500)
    data, _ = generate(spec, np.random.default_rng(100))
    model = spec.analysis_model()
    cfg = GibbsConfig(iterations=4600, burn_in=600, m=5, seed=17)
    chain = gibbs_run(data, model, PriorSpec(), cfg)
    inv_chain = obs_information(chain)
    inv_num = obs_information_numeric(data, chain.posterior_mean(), model,
                                      L=150, seed=555)
    # Compare on the correlation-like scale so near-zero entries do not
    # blow up a relative comparison.
    scale = np.sqrt(np.outer(np.diag(inv_chain), np.diag(inv_chain)))
    gap = np.abs(inv_chain - inv_num) / scale
    assert gap.max() < 0.15


# ---------------------------------------------------------------------------
# Mean scores
# ---------------------------------------------------------------------------

def test_mean_score_exact_for_complete_row(pipeline_a):
    data = pipeline_a["data"]
    theta = pipeline_a["chain"].posterior_mean()
    model = pipeline_a["model"]
    unit = int(np.nonzero(data.fully_observed)[0][0])
    s3 = mean_score(data, unit, theta, model, L=3, rng=np.random.default_rng(0))
    s50 = mean_score(data, unit, theta, model, L=50,
                     rng=np.random.default_rng(9))
    exact = complete_data_scores(
        theta, model, data.A[unit:unit + 1], data.X[unit:unit + 1],
        data.Y[unit:unit + 1], data.R[unit:unit + 1],
        data.R_Y[unit:unit + 1])[0]
    assert np.array_equal(s3, exact)
    assert np.array_equal(s50, exact)


def gaussian_row_setup():
    theta = ThetaParams(
        beta0=np.array([2.0, 3.0, 2.0]), beta1=np.array([1.0, 2.0, 1.0]),
        sigma0=1.0, sigma1=1.0, alpha=np.array([-0.2, 0.3, 0.0]),
        mu_x=np.zeros(2), sigma_x=np.array([[1.0, 0.2], [0.2, 1.0]]))
    row = ObservedDataset(A=[1], Y=[1.7], X=np.array([[0.4, np.nan]]),
                          R=np.array([[1, 0]]), R_Y=[1])
    # Conditional of x2 given everything (alpha puts no weight on x2):
    prior_mean = 0.2 * 0.4
    prior_var = 1.0 - 0.04
    resid = 1.7 - 1.0 - 2.0 * 0.4
    lam = 1.0 / prior_var + 1.0
    m_star = (prior_mean / prior_var + resid) / lam
    v_star = 1.0 / lam
    return theta, row, m_star, v_star


def test_mean_score_gaussian_submodel_closed_form():
    """beta1 block: E[w (y - w'beta)] over x2 ~ N(m*, v*) in closed form."""
    theta, row, m_star, v_star = gaussian_row_setup()
    model = JointModelSpec.mar(2)
    L = 10_000
    rng = np.random.default_rng(11)
    X_rows = np.repeat(row.X, L, axis=0)
    comp = draw_completions(row, theta, model, L, rng)
    X_rows[:, 1] = comp.x_draws[:, 0]
    layout = ThetaLayout(2, model)
    S = complete_data_scores(theta, model, np.ones(L, int),
                             X_rows, np.full(L, 1.7),
                             np.tile(row.R, (L, 1)), np.ones(L, int), layout)
    sl = layout.slices["beta1"]
    mc = S[:, sl].mean(axis=0)
    se = S[:, sl].std(axis=0, ddof=1) / np.sqrt(L)

    # E[resid] with resid = y - b0 - b1 x1 - b2 x2, x2 ~ N(m*, v*).
    c = 1.7 - 1.0 - 2.0 * 0.4
    e_resid = c - 1.0 * m_star
    e_x2_resid = c * m_star - 1.0 * (v_star + m_star ** 2)
    expected = np.array([e_resid, 0.4 * e_resid, e_x2_resid])  # sigma1 = 1
    assert (np.abs(mc - expected) < 4 * se + 1e-12).all()


def test_mean_score_self_consistency_at_posterior_mean(pipeline_a):
    # theta_hat nearly solves the mean-score equation: the Newton step
    # I_obs_inv (1/n) sum S_bar displaces theta by << posterior SD.
    state = pipeline_a["state"]
    chain = pipeline_a["chain"]
    avg = state.mean_scores.mean(axis=0)
    step = state.I_obs_inv @ avg / pipeline_a["data"].n * pipeline_a["data"].n
    # I_obs_inv is n*cov, avg is the per-unit average score: displacement
    # = (n cov) (1/n) sum S_bar / n = cov @ sum(S_bar).
    disp = state.I_obs_inv @ avg
    assert (np.abs(disp) < 3 * chain.posterior_sd()).all()


# ---------------------------------------------------------------------------
# Gamma
# ---------------------------------------------------------------------------

def test_gamma_zero_without_missing_data(complete_pipeline):
    ws = ArraysWorkspace(complete_pipeline["state"],
                         complete_pipeline["imputed"])
    for tag in ("regression", "ipw", "aipw", "matching"):
        arrays = ws.arrays(EstimatorKind(tag))
        assert np.array_equal(arrays.gamma_hat,
                              np.zeros_like(arrays.gamma_hat)), tag


def test_gamma_hat_public_entry_point(pipeline_a):
    from miboot.wild_bootstrap import gamma_hat
    chain = pipeline_a["chain"]
    g = gamma_hat(pipeline_a["data"], chain.posterior_mean(),
                  pipeline_a["model"], EstimatorKind("regression"), L=40,
                  rng=np.random.default_rng(21),
                  imputed=pipeline_a["imputed"], information=chain)
    assert g.shape == (chain.layout.dim,)
    assert np.linalg.norm(g) > 0


def test_gamma_gaussian_submodel_covariance_oracle():
    """Gamma for the functional psi = x2 on a one-unit dataset equals
    cov(x2, S | observed data), available in closed form for the
    all-Gaussian sub-model. Checks the completion/score machinery that
    gamma_hat is built from."""
    theta, row, m_star, v_star = gaussian_row_setup()
    model = JointModelSpec.mar(2)
    L = 10_000
    rng = np.random.default_rng(12)
    comp = draw_completions(row, theta, model, L, rng)
    x2 = comp.x_draws[:, 0]
    X_rows = np.repeat(row.X, L, axis=0)
    X_rows[:, 1] = x2
    layout = ThetaLayout(2, model)
    S = complete_data_scores(theta, model, np.ones(L, int), X_rows,
                             np.full(L, 1.7), np.tile(row.R, (L, 1)),
                             np.ones(L, int), layout)
    gamma_mc = (x2[:, None] * S).mean(axis=0) - x2.mean() * S.mean(axis=0)

    sl = layout.slices["beta1"]
    # Closed form: S_b = w resid with resid = c - x2 (b2 = sigma1 = 1).
    c = 1.7 - 1.0 - 2.0 * 0.4
    cov_b0 = -v_star                       # cov(x2, c - x2)
    cov_b1 = 0.4 * cov_b0
    # cov(x2, x2 c - x2^2) = c v* - 2 m* v*
    cov_b2 = c * v_star - 2.0 * m_star * v_star
    expected = np.array([cov_b0, cov_b1, cov_b2])
    se = np.abs(x2[:, None] * S[:, sl]).std(axis=0, ddof=1) / np.sqrt(L)
    assert (np.abs(gamma_mc[sl] - expected) < 4 * se + 1e-12).all()


@pytest.mark.slow
def test_gamma_stabilizes_in_L(pipeline_a):
    data = pipeline_a["data"]
    chain = pipeline_a["chain"]
    model = pipeline_a["model"]
    kind = EstimatorKind("regression")
    norms = {}
    for L in (50, 200):
        arrays = build_arrays(data, pipeline_a["imputed"],
                              chain.posterior_mean(), model, kind, L=L,
                              rng=np.random.default_rng(67),
                              information=chain)
        norms[L] = np.linalg.norm(arrays.gamma_hat)
    assert abs(norms[50] / norms[200] - 1.0) < 0.05


# ---------------------------------------------------------------------------
# Arrays
# ---------------------------------------------------------------------------

def test_arrays_collapse_without_missing_data(complete_pipeline):
    shadow = complete_pipeline["shadow"]
    ws = ArraysWorkspace(complete_pipeline["state"],
                         complete_pipeline["imputed"])
    fit = fit_nuisance(shadow)
    for tag in ("regression", "ipw", "aipw", "matching"):
        kind = EstimatorKind(tag)
        arrays = ws.arrays(kind)
        assert np.array_equal(arrays.xi_imp, np.zeros_like(arrays.xi_imp)), tag
        # Sum of all array entries = the centered full-sample influence sum.
        iv = influence(shadow, ws.stacked_fit, kind)
        expected = (iv.psi - arrays.tau_center).sum() / np.sqrt(shadow.n)
        assert arrays.flat().sum() == pytest.approx(expected, abs=1e-8), tag

        boot = bootstrap(arrays, MAMMEN, B=10_000,
                         rng=np.random.default_rng(5))
        infl_var = float(((iv.psi - iv.psi.mean()) ** 2).sum()) / shadow.n ** 2
        assert abs(boot.V_BS / infl_var - 1.0) < 0.05, tag


def test_smooth_kind_xi_imp_zero_for_complete_rows(pipeline_a):
    ws = ArraysWorkspace(pipeline_a["state"], pipeline_a["imputed"])
    comp = pipeline_a["data"].fully_observed
    for tag in ("regression", "ipw", "aipw"):
        arrays = ws.arrays(EstimatorKind(tag))
        assert np.array_equal(arrays.xi_imp[comp],
                              np.zeros_like(arrays.xi_imp[comp])), tag
        assert not np.array_equal(arrays.xi_imp[~comp],
                                  np.zeros_like(arrays.xi_imp[~comp]))


def test_mean_scores_exact_for_complete_rows(pipeline_a):
    data = pipeline_a["data"]
    state = pipeline_a["state"]
    comp_idx = np.nonzero(data.fully_observed)[0][:25]
    theta = pipeline_a["chain"].posterior_mean()
    exact = complete_data_scores(
        theta, pipeline_a["model"], data.A[comp_idx], data.X[comp_idx],
        data.Y[comp_idx], data.R[comp_idx], data.R_Y[comp_idx])
    assert np.array_equal(state.mean_scores[comp_idx], exact)


def test_arrays_basic_properties(pipeline_a):
    ws = ArraysWorkspace(pipeline_a["state"], pipeline_a["imputed"])
    n = pipeline_a["data"].n
    for tag in ("regression", "matching"):
        arrays = ws.arrays(EstimatorKind(tag))
        assert np.linalg.eigvalsh(arrays.I_obs_inv).min() > 0
        assert arrays.xi_imp.shape == (n, 5)
        assert arrays.tau_center == pytest.approx(arrays.cond_psi.mean())
        # mean zero to O(n^{-1/2}): the centered block only carries the
        # mean-score correction.
        assert abs(arrays.xi_obs.mean()) < 4 * arrays.xi_obs.std() / np.sqrt(n)


def test_martingale_mean_zero_under_reimputation(pipeline_a):
    """Fresh completions of one unit, pushed through the frozen psi,
    average to cond_psi within Monte Carlo error (4 SE)."""
    data = pipeline_a["data"]
    model = pipeline_a["model"]
    theta = pipeline_a["chain"].posterior_mean()
    kind = EstimatorKind("regression")

    rng = np.random.default_rng(99)
    state_big = PredictiveState.create(data, theta, model, L=1000, rng=rng,
                                       information=pipeline_a["chain"])
    ws = ArraysWorkspace(state_big, pipeline_a["imputed"])
    terms = ws.terms_for(kind)
    arrays = ws.arrays(kind)

    incomplete = np.nonzero(~data.fully_observed)[0]
    from miboot.estimators import psi_values
    from miboot.imputer import predictive_conditional
    for unit in incomplete[:5]:
        X_rows, Y_vals = predictive_conditional(data, int(unit), theta, model,
                                                L=200, rng=rng)
        vals = psi_values(np.full(200, data.A[unit]), X_rows, Y_vals,
                          ws.stacked_fit, terms, kind)
        diff = vals - arrays.cond_psi[unit]
        se = vals.std(ddof=1) * np.sqrt(1.0 / 200 + 1.0 / 1000)
        assert abs(diff.mean()) < 4 * se


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

def degenerate_arrays(n=30, m=3):
    from miboot.wild_bootstrap import MartingaleArrays
    d = 4
    return MartingaleArrays(
        xi_obs=np.zeros(n), xi_imp=np.zeros((n, m)), gamma_hat=np.zeros(d),
        I_obs_inv=np.eye(d), L=10, kind=EstimatorKind("regression"))


def test_bootstrap_degenerate_arrays_warns():
    with pytest.warns(RuntimeWarning):
        boot = bootstrap(degenerate_arrays(), MAMMEN, B=50,
                         rng=np.random.default_rng(0))
    assert boot.V_BS == 0.0
    assert np.array_equal(boot.replicates, np.zeros(50))


def test_bootstrap_zero_mean_and_variance_identity(pipeline_a):
    ws = ArraysWorkspace(pipeline_a["state"], pipeline_a["imputed"])
    arrays = ws.arrays(EstimatorKind("ipw"))
    n = arrays.n
    target = float((arrays.flat() ** 2).sum()) / n
    for scheme in SCHEMES:
        boot = bootstrap(arrays, scheme, B=10_000, rng=np.random.default_rng(7))
        assert abs(np.mean(boot.replicates)) < 4 * np.sqrt(boot.V_BS / 10_000), \
            scheme.tag
        assert abs(boot.V_BS / target - 1.0) < 0.05, scheme.tag


def test_bootstrap_sign_flip_invariance(pipeline_a):
    import dataclasses
    ws = ArraysWorkspace(pipeline_a["state"], pipeline_a["imputed"])
    arrays = ws.arrays(EstimatorKind("regression"))
    flipped = dataclasses.replace(arrays, xi_obs=-arrays.xi_obs,
                                  xi_imp=-arrays.xi_imp)
    b1 = bootstrap(arrays, MAMMEN, B=400, rng=np.random.default_rng(3))
    b2 = bootstrap(flipped, MAMMEN, B=400, rng=np.random.default_rng(3))
    assert b1.V_BS == b2.V_BS


def test_bootstrap_ci_styles():
    # Zero-level limit on a symmetric replicate set: both styles shrink
    # onto the point estimate (the median of {-1, 1} interpolates to 0).
    reps = np.array([-1.0, 1.0] * 500)
    lo, hi = bootstrap_ci(2.0, reps, V_BS=1.0, level=1e-6, style="quantile")
    assert (lo + hi) / 2 == pytest.approx(2.0, abs=1e-12)
    assert hi - lo < 1e-2
    lo, hi = bootstrap_ci(2.0, reps, V_BS=1.0, level=1e-6, style="wald")
    assert (lo + hi) / 2 == pytest.approx(2.0, abs=1e-12)
    assert hi - lo < 1e-5

    from scipy.stats import norm
    lo, hi = bootstrap_ci(0.5, reps, V_BS=4.0, level=0.95, style="wald")
    assert hi == pytest.approx(0.5 + norm.ppf(0.975) * 2.0, abs=1e-12)
    lo, hi = bootstrap_ci(0.5, np.array([-3.0, 0.0, 1.0]), V_BS=1.0,
                          level=0.5, style="quantile")
    assert lo < hi

    with pytest.raises(ValueError):
        bootstrap_ci(0.0, reps, 1.0, level=1.5, style="wald")
    with pytest.raises(ValueError):
        bootstrap_ci(0.0, reps, 1.0, level=0.95, style="percentile")
