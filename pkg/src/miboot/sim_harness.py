"""Scenario generators, the Monte Carlo replication loop, and metrics.

Four benchmark scenarios share one outcome/treatment design and differ
in how the second confounder (and, for scenario d, the outcome) goes
missing, and in which mechanism the analysis assumes:

  a: missingness depends on (A, X1, Y) only; analysis assumes MAR.
  b: missingness depends on X2 itself; analysis models it (MNAR).
  c: generated exactly as (b) but analyzed under a wrong MAR assumption.
  d: both X2 and Y missing not at random; analysis models both probits.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import ndtr

from .data_model import EstimatorKind, ObservedDataset
from .errors import ConfigError, EstimationError, GibbsError, MibootError
from .estimators import fit_nuisance, influence
from .imputer import (GibbsConfig, JointModelSpec, PriorSpec, gibbs_run,
                      impute_from_chain)
from .mi_engine import mi_estimate, rubin_ci
from .wild_bootstrap import (ArraysWorkspace, PredictiveState, WeightScheme,
                             bootstrap, bootstrap_ci)

logger = logging.getLogger(__name__)

DEFAULT_KINDS = (EstimatorKind("regression"), EstimatorKind("ipw"),
                 EstimatorKind("aipw"), EstimatorKind("matching", M=1))


@dataclass(frozen=True)
class ScenarioSpec:
    """Data-generating design plus the mechanism the analysis assumes."""

    tag: str
    n: int = 1000
    true_tau: float = -1.0
    beta0: tuple = (2.0, 3.0, 2.0)
    beta1: tuple = (1.0, 2.0, 1.0)
    sigma0: float = 1.0
    sigma1: float = 1.0
    alpha: tuple = (-0.2, 0.3, 0.4)
    corr: float = 0.2
    miss_coord: int = 1
    rx_terms: tuple = ()
    rx_coefs: tuple = ()
    ry_terms: tuple = None
    ry_coefs: tuple = None
    analysis_mechanism: str = "mar"

    @classmethod
    def make(cls, tag: str, n: int = 1000, **overrides) -> "ScenarioSpec":
        if tag == "a":
            base = dict(rx_terms=("const", "A", "X0", "Y"),
                        rx_coefs=(-0.1, 0.1, 0.5, 0.2),
                        analysis_mechanism="mar")
        elif tag in ("b", "c"):
            base = dict(rx_terms=("const", "X1"), rx_coefs=(0.2, 1.0),
                        analysis_mechanism="mnar" if tag == "b" else "mar")
        elif tag == "d":
            base = dict(rx_terms=("const", "X1"), rx_coefs=(0.8, 1.0),
                        ry_terms=("const", "A", "X0", "X1"),
                        ry_coefs=(1.0, 0.2, 0.5, 0.5),
                        analysis_mechanism="mnar")
        else:
            raise ConfigError(f"unknown scenario tag {tag!r}")
        base.update(overrides)
        return cls(tag=tag, n=n, **base)

    def generation_fields(self) -> dict:
        d = asdict(self)
        d.pop("analysis_mechanism")
        d.pop("tag")
        return d

    def analysis_model(self) -> JointModelSpec:
        if self.analysis_mechanism == "mar":
            return JointModelSpec.mar(p=2)
        mx = {self.miss_coord: self.rx_terms}
        my = self.ry_terms
        return JointModelSpec(p=2, mechanism="mnar", missingness_x=mx,
                              missingness_y=my)


def _probit_prob(terms, coefs, A, X, Y):
    lin = np.zeros(len(A), dtype=float)
    for t, c in zip(terms, coefs):
        if t == "const":
            lin += c
        elif t == "A":
            lin += c * A
        elif t == "Y":
            lin += c * Y
        else:
            lin += c * X[:, int(t[1:])]
    return ndtr(lin)


def generate(spec: ScenarioSpec, rng):
    """Draw one sample; returns (masked dataset, complete shadow)."""
    n = spec.n
    cov = np.array([[1.0, spec.corr], [spec.corr, 1.0]])
    X = rng.standard_normal((n, 2)) @ np.linalg.cholesky(cov).T
    W = np.column_stack([np.ones(n), X])
    y0 = W @ np.asarray(spec.beta0) + spec.sigma0 * rng.standard_normal(n)
    y1 = W @ np.asarray(spec.beta1) + spec.sigma1 * rng.standard_normal(n)
    A = (rng.random(n) < ndtr(W @ np.asarray(spec.alpha))).astype(int)
    Y = np.where(A == 1, y1, y0)

    r_x = (rng.random(n) < _probit_prob(spec.rx_terms, spec.rx_coefs,
                                        A, X, Y)).astype(int)
    R = np.ones((n, 2), dtype=int)
    R[:, spec.miss_coord] = r_x
    if spec.ry_terms is not None:
        R_Y = (rng.random(n) < _probit_prob(spec.ry_terms, spec.ry_coefs,
                                            A, X, Y)).astype(int)
    else:
        R_Y = np.ones(n, dtype=int)

    Xm = X.copy()
    Xm[R == 0] = np.nan
    Ym = Y.copy()
    Ym[R_Y == 0] = np.nan
    observed = ObservedDataset(A=A, Y=Ym, X=Xm, R=R, R_Y=R_Y)
    shadow = ObservedDataset.from_complete(A=A, Y=Y, X=X)
    return observed, shadow


# ---------------------------------------------------------------------------
# Study loop
# ---------------------------------------------------------------------------

@dataclass
class StudyRow:
    estimator: str
    m: int
    point_mean: float
    mc_var: float
    rubin_var_mean: float
    rubin_rel_bias: float
    rubin_coverage: float
    rubin_width: float
    bs_var_mean: float
    bs_rel_bias: float
    bs_cov_quantile: float
    bs_cov_wald: float
    bs_width_quantile: float
    bs_width_wald: float


@dataclass
class CongenialityRow:
    estimator: str
    m: int
    var_full: float          # var(tau_n) over replications
    var_mi: float            # var(tau_MI)
    var_diff: float          # var(tau_MI - tau_n)
    cov_diff_full: float     # cov(tau_MI - tau_n, tau_n)
    cov_mc_se: float         # Monte Carlo SE of that covariance


@dataclass
class StudyReport:
    scenario: str
    n: int
    reps_requested: int
    reps_done: int
    failures: int
    m_values: tuple
    B: int
    scheme: str
    seed: int
    level: float
    true_tau: float
    rows: list = field(default_factory=list)
    congeniality: list = field(default_factory=list)
    raw: dict = None


def _replicate(spec, analysis, prior, kinds, m_values, B, scheme, L,
               gibbs_iters, burn_in, level, sweeps, rep_seed):
    ss = np.random.SeedSequence(rep_seed)
    s_gen, s_gibbs, s_sel, s_comp, s_boot = ss.spawn(5)
    data, shadow = generate(spec, np.random.default_rng(s_gen))

    # Shadow full-sample values use the same influence-representation
    # center that the MI engine reports (see mi_estimate).
    fit_shadow = fit_nuisance(shadow)
    out = {"tau_n": {k.tag: influence(shadow, fit_shadow, k).tau_hat
                     for k in kinds}}

    cfg = GibbsConfig(iterations=gibbs_iters, burn_in=burn_in,
                      m=max(m_values),
                      seed=int(s_gibbs.generate_state(1, np.uint32)[0]))
    chain = gibbs_run(data, analysis, prior, cfg)
    theta_hat = chain.posterior_mean()
    imputed_all = impute_from_chain(chain, max(m_values),
                                    np.random.default_rng(s_sel))
    state = PredictiveState.create(data, theta_hat, analysis, L,
                                   np.random.default_rng(s_comp),
                                   information=chain, sweeps=sweeps)
    rng_boot = np.random.default_rng(s_boot)

    per = {}
    for m in m_values:
        ws = ArraysWorkspace(state, imputed_all[:m])
        for kind in kinds:
            res = mi_estimate(imputed_all[:m], kind)
            lo_r, hi_r = rubin_ci(res, level)
            arrays = ws.arrays(kind)
            boot = bootstrap(arrays, scheme, B, rng_boot)
            lo_q, hi_q = bootstrap_ci(res.tau_mi, boot.replicates, boot.V_BS,
                                      level, style="quantile")
            lo_w, hi_w = bootstrap_ci(res.tau_mi, boot.replicates, boot.V_BS,
                                      level, style="wald")
            per[(kind.tag, m)] = {
                "tau_mi": res.tau_mi, "V_rubin": res.V_mi,
                "rubin_lo": lo_r, "rubin_hi": hi_r,
                "V_bs": boot.V_BS,
                "q_lo": lo_q, "q_hi": hi_q, "w_lo": lo_w, "w_hi": hi_w,
                "T": boot.replicates,
            }
    out["per"] = per
    return out


def run_study(spec: ScenarioSpec, reps: int, m_values=(5,),
              kinds=DEFAULT_KINDS, B: int = 300,
              scheme: WeightScheme = WeightScheme("mammen"), seed: int = 0,
              gibbs_iters: int = 1500, burn_in: int = 500, L: int = 50,
              level: float = 0.95, sweeps: int = 32, prior: PriorSpec = None,
              collect_raw: bool = False, max_failure_rate: float = 0.02,
              progress: bool = False) -> StudyReport:
    """Monte Carlo study over ``reps`` replications.

    Deterministic given ``seed``: replication r uses independent streams
    derived from SeedSequence([seed, r]), and results are aggregated by
    replication index. Replication-level numerical failures are excluded
    and counted; the study aborts if they exceed ``max_failure_rate``.
    """
    if prior is None:
        prior = PriorSpec()
    analysis = spec.analysis_model()
    m_values = tuple(sorted(set(int(m) for m in m_values)))
    results = []
    failures = 0
    for r in range(reps):
        try:
            results.append(_replicate(
                spec, analysis, prior, kinds, m_values, B, scheme, L,
                gibbs_iters, burn_in, level, sweeps, rep_seed=[seed, r]))
        except (EstimationError, GibbsError, ValueError) as exc:
            failures += 1
            logger.warning("replication %d failed: %s", r, exc)
        if progress and (r + 1) % 25 == 0:
            logger.info("scenario %s: %d/%d replications", spec.tag, r + 1, reps)
    if failures > max_failure_rate * reps:
        raise MibootError(
            f"study failed: {failures}/{reps} replications errored")

    report = StudyReport(
        scenario=spec.tag, n=spec.n, reps_requested=reps,
        reps_done=len(results), failures=failures, m_values=m_values, B=B,
        scheme=scheme.tag, seed=seed, level=level, true_tau=spec.true_tau)

    raw = {"tau_n": {}, "tau_mi": {}, "T_pool": {}} if collect_raw else None
    for kind in kinds:
        tag = kind.tag
        tau_n = np.array([res["tau_n"][tag] for res in results])
        for m in m_values:
            cells = [res["per"][(tag, m)] for res in results]
            tau_mi = np.array([c["tau_mi"] for c in cells])
            v_rub = np.array([c["V_rubin"] for c in cells])
            v_bs = np.array([c["V_bs"] for c in cells])
            mc_var = float(np.var(tau_mi, ddof=1))
            tau0 = spec.true_tau

            def _cov(lo_key, hi_key):
                lo = np.array([c[lo_key] for c in cells])
                hi = np.array([c[hi_key] for c in cells])
                return (100.0 * float(np.mean((lo <= tau0) & (tau0 <= hi))),
                        float(np.mean(hi - lo)))

            cov_r, wid_r = _cov("rubin_lo", "rubin_hi")
            cov_q, wid_q = _cov("q_lo", "q_hi")
            cov_w, wid_w = _cov("w_lo", "w_hi")
            report.rows.append(StudyRow(
                estimator=tag, m=m,
                point_mean=float(tau_mi.mean()), mc_var=mc_var,
                rubin_var_mean=float(v_rub.mean()),
                rubin_rel_bias=100.0 * (float(v_rub.mean()) / mc_var - 1.0),
                rubin_coverage=cov_r, rubin_width=wid_r,
                bs_var_mean=float(v_bs.mean()),
                bs_rel_bias=100.0 * (float(v_bs.mean()) / mc_var - 1.0),
                bs_cov_quantile=cov_q, bs_cov_wald=cov_w,
                bs_width_quantile=wid_q, bs_width_wald=wid_w))

        # Congeniality diagnostic at the smallest m.
        m0 = m_values[0]
        tau_mi0 = np.array([res["per"][(tag, m0)]["tau_mi"] for res in results])
        diff = tau_mi0 - tau_n
        R = len(results)
        cov_hat = float(np.cov(diff, tau_n, ddof=1)[0, 1])
        cov_se = float(np.sqrt(
            (np.var(diff, ddof=1) * np.var(tau_n, ddof=1) + cov_hat ** 2) / R))
        report.congeniality.append(CongenialityRow(
            estimator=tag, m=m0,
            var_full=float(np.var(tau_n, ddof=1)),
            var_mi=float(np.var(tau_mi0, ddof=1)),
            var_diff=float(np.var(diff, ddof=1)),
            cov_diff_full=cov_hat, cov_mc_se=cov_se))

        if collect_raw:
            raw["tau_n"][tag] = tau_n
            raw["tau_mi"][tag] = {
                m: np.array([res["per"][(tag, m)]["tau_mi"] for res in results])
                for m in m_values}
            raw["T_pool"][tag] = {
                m: np.concatenate([res["per"][(tag, m)]["T"] for res in results])
                for m in m_values}
    report.raw = raw
    return report


# ---------------------------------------------------------------------------
# Table output
# ---------------------------------------------------------------------------

_COLUMNS = (
    "estimator", "m", "point_est_x10", "mc_var_x1e4",
    "rel_bias_rubin_pct", "rel_bias_bs_pct",
    "coverage_rubin_pct", "coverage_bs_quantile_pct", "coverage_bs_wald_pct",
    "width_rubin_x100", "width_bs_quantile_x100", "width_bs_wald_x100",
)


def _format_row(row: StudyRow) -> list:
    return [
        row.estimator, str(row.m),
        f"{row.point_mean * 10:.1f}", f"{row.mc_var * 1e4:.1f}",
        f"{row.rubin_rel_bias:.1f}", f"{row.bs_rel_bias:.1f}",
        f"{row.rubin_coverage:.1f}", f"{row.bs_cov_quantile:.1f}",
        f"{row.bs_cov_wald:.1f}",
        f"{row.rubin_width * 100:.1f}", f"{row.bs_width_quantile * 100:.1f}",
        f"{row.bs_width_wald * 100:.1f}",
    ]


def emit(report: StudyReport, fmt: str = "csv") -> str:
    """Serialize the study table (one row per estimator and m).

    Formats: csv (RFC-4180 quoting), json (adds run metadata and the
    congeniality diagnostics), markdown. Relative bias and coverage are
    printed with one decimal; widths scaled by 100 with one decimal.
    """
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_COLUMNS)
        for row in report.rows:
            writer.writerow(_format_row(row))
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(_COLUMNS) + " |",
                 "|" + "|".join(["---"] * len(_COLUMNS)) + "|"]
        for row in report.rows:
            lines.append("| " + " | ".join(_format_row(row)) + " |")
        return "\n".join(lines) + "\n"
    if fmt == "json":
        payload = {
            "scenario": report.scenario, "n": report.n,
            "reps_requested": report.reps_requested,
            "reps_done": report.reps_done, "failures": report.failures,
            "m_values": list(report.m_values), "B": report.B,
            "scheme": report.scheme, "seed": report.seed,
            "level": report.level, "true_tau": report.true_tau,
            "rows": [dict(zip(_COLUMNS, _format_row(r))) for r in report.rows],
            "congeniality": [asdict(c) for c in report.congeniality],
        }
        return json.dumps(payload, indent=2) + "\n"
    raise ConfigError(f"unknown output format {fmt!r}")
