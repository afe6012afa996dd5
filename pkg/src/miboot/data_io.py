"""CSV ingestion, flat-file run configuration, and the applied pipeline.

The config format is deliberately plain: one ``section.key = value``
pair per line, ``#`` comments, no nesting. The package parses it itself
so results do not depend on a document-format library.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy
from scipy.special import ndtr

from . import __version__
from .data_model import EstimatorKind, ObservedDataset, validate
from .errors import ConfigError, DataFormatError
from .imputer import (GibbsConfig, JointModelSpec, PriorSpec, gibbs_run,
                      impute_from_chain)
from .mi_engine import mi_estimate, rubin_ci
from .wild_bootstrap import (ArraysWorkspace, PredictiveState, WeightScheme,
                             bootstrap, bootstrap_ci)


@dataclass(frozen=True)
class ColumnRoles:
    """Mapping from CSV columns to analysis roles.

    ``missing_token`` marks missing cells; the empty string and "NA" are
    always recognized in addition to the configured token.
    """

    treatment: str
    outcome: str
    confounders: tuple
    missing_token: str = ""

    def __post_init__(self):
        object.__setattr__(self, "confounders", tuple(self.confounders))
        names = (self.treatment, self.outcome) + self.confounders
        if len(set(names)) != len(names):
            raise ConfigError("column roles must name distinct columns")

    @property
    def missing_tokens(self) -> set:
        return {self.missing_token, "", "NA"}


def load_csv(path, roles: ColumnRoles) -> ObservedDataset:
    """Read an analysis dataset from a headered CSV file.

    Treatment must parse to {0, 1} and may not be missing; outcome and
    confounder cells matching a missing token produce mask zeros.
    Categorical confounders must arrive pre-expanded as numeric dummies.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, header required")
        rows = list(reader)

    cols = {}
    for name in (roles.treatment, roles.outcome) + roles.confounders:
        if name not in header:
            raise DataFormatError(f"{path}: column {name!r} not in header")
        cols[name] = header.index(name)

    n = len(rows)
    p = len(roles.confounders)
    A = np.zeros(n, dtype=int)
    Y = np.full(n, np.nan)
    X = np.full((n, p), np.nan)
    R = np.zeros((n, p), dtype=int)
    R_Y = np.zeros(n, dtype=int)

    def cell(row_vals, row_idx, name):
        idx = cols[name]
        if idx >= len(row_vals):
            raise DataFormatError(
                f"row {row_idx + 2}, column {name!r}: missing field")
        return row_vals[idx].strip()

    for i, row in enumerate(rows):
        raw = cell(row, i, roles.treatment)
        if raw in roles.missing_tokens:
            raise DataFormatError(
                f"row {i + 2}, column {roles.treatment!r}: treatment "
                f"missingness is unsupported")
        try:
            a = float(raw)
        except ValueError:
            raise DataFormatError(
                f"row {i + 2}, column {roles.treatment!r}: "
                f"unparseable value {raw!r}")
        if a not in (0.0, 1.0):
            raise DataFormatError(
                f"row {i + 2}, column {roles.treatment!r}: treatment must "
                f"be 0 or 1, got {raw!r}")
        A[i] = int(a)

        raw = cell(row, i, roles.outcome)
        if raw not in roles.missing_tokens:
            try:
                Y[i] = float(raw)
            except ValueError:
                raise DataFormatError(
                    f"row {i + 2}, column {roles.outcome!r}: "
                    f"unparseable value {raw!r}")
            R_Y[i] = 1

        for j, name in enumerate(roles.confounders):
            raw = cell(row, i, name)
            if raw in roles.missing_tokens:
                continue
            try:
                X[i, j] = float(raw)
            except ValueError:
                raise DataFormatError(
                    f"row {i + 2}, column {name!r}: unparseable value {raw!r}")
            R[i, j] = 1

    return ObservedDataset(A=A, Y=Y, X=X, R=R, R_Y=R_Y)


def save_csv(data: ObservedDataset, path, roles: ColumnRoles,
             missing_token: str = "NA"):
    """Write a dataset in the same layout load_csv reads."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([roles.treatment, roles.outcome] + list(roles.confounders))
        for i in range(data.n):
            row = [str(int(data.A[i]))]
            row.append(repr(float(data.Y[i])) if data.R_Y[i] else missing_token)
            for j in range(data.p):
                row.append(repr(float(data.X[i, j])) if data.R[i, j]
                           else missing_token)
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Flat config files
# ---------------------------------------------------------------------------

def parse_config(path) -> dict:
    """Parse ``section.key = value`` lines into a flat string dict."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def _get(cfg, key, default=None, cast=str):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"config key {key!r} is required")
        return default
    try:
        return cast(cfg[key])
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {cfg[key]!r}")


def _get_list(cfg, key, default=None):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"config key {key!r} is required")
        return default
    return tuple(s.strip() for s in cfg[key].split(",") if s.strip())


@dataclass
class AnalysisConfig:
    roles: ColumnRoles
    mechanism: str
    prior: PriorSpec
    gibbs: GibbsConfig
    estimators: tuple
    matches: int
    B: int
    scheme: WeightScheme
    cond_draws: int
    level: float
    seed: int
    missing_x_predictors: tuple = None
    missing_y_predictors: tuple = None


def analysis_config(cfg: dict) -> AnalysisConfig:
    roles = ColumnRoles(
        treatment=_get(cfg, "data.treatment"),
        outcome=_get(cfg, "data.outcome"),
        confounders=_get_list(cfg, "data.confounders"),
        missing_token=_get(cfg, "data.missing_token", default=""),
    )
    seed = _get(cfg, "run.seed", default=0, cast=int)
    gibbs = GibbsConfig(
        iterations=_get(cfg, "gibbs.iterations", default=5000, cast=int),
        burn_in=_get(cfg, "gibbs.burn_in", default=2000, cast=int),
        m=_get(cfg, "run.m", default=10, cast=int),
        seed=seed,
    )
    prior = PriorSpec(
        coef_variance=_get(cfg, "prior.coef_variance", default=100.0, cast=float),
        precision_shape=_get(cfg, "prior.precision_shape", default=0.01,
                             cast=float),
        precision_rate=_get(cfg, "prior.precision_rate", default=0.01,
                            cast=float),
    )
    est_names = _get_list(cfg, "run.estimators",
                          default=("regression", "ipw", "aipw", "matching"))
    return AnalysisConfig(
        roles=roles,
        mechanism=_get(cfg, "model.mechanism", default="mar"),
        prior=prior, gibbs=gibbs,
        estimators=est_names,
        matches=_get(cfg, "run.matches", default=1, cast=int),
        B=_get(cfg, "run.B", default=1000, cast=int),
        scheme=WeightScheme(_get(cfg, "run.weights", default="mammen")),
        cond_draws=_get(cfg, "run.cond_draws", default=200, cast=int),
        level=_get(cfg, "run.level", default=0.95, cast=float),
        seed=seed,
        missing_x_predictors=_get_list(cfg, "model.missing_x_predictors",
                                       default=()) or None,
        missing_y_predictors=_get_list(cfg, "model.missing_y_predictors",
                                       default=()) or None,
    )


# ---------------------------------------------------------------------------
# Applied analysis
# ---------------------------------------------------------------------------

@dataclass
class AnalysisRow:
    estimator: str
    point: float
    rubin_var: float
    rubin_lo: float
    rubin_hi: float
    bs_var: float
    bs_quantile_lo: float
    bs_quantile_hi: float
    bs_wald_lo: float
    bs_wald_hi: float


@dataclass
class AnalysisReport:
    rows: list
    m: int
    B: int
    scheme: str
    mechanism: str
    seed: int
    level: float
    n: int
    p: int


def _build_kinds(cfg: AnalysisConfig, p: int):
    kinds = []
    match_on = "propensity" if p > 3 else "covariates"
    for name in cfg.estimators:
        if name == "matching":
            kinds.append(EstimatorKind("matching", M=cfg.matches,
                                       match_on=match_on))
        else:
            kinds.append(EstimatorKind(name))
    return kinds


def analyze(data: ObservedDataset, cfg: AnalysisConfig) -> AnalysisReport:
    """Impute, combine, and bootstrap one dataset for every estimator.

    Matching matches on the estimated propensity score when p > 3
    (dimension reduction), on the covariates otherwise.
    """
    report = validate(data)
    if not report.ok:
        raise DataFormatError("invalid dataset: " + "; ".join(report.violations))
    spec = JointModelSpec.for_dataset(
        data, cfg.mechanism,
        missingness_x=(None if cfg.missing_x_predictors is None else
                       {j: cfg.missing_x_predictors
                        for j in range(data.p) if (data.R[:, j] == 0).any()}),
        missingness_y=cfg.missing_y_predictors,
    ) if cfg.mechanism == "mnar" else JointModelSpec.mar(data.p)

    ss = np.random.SeedSequence([cfg.seed, 0xA11])
    s_sel, s_comp, s_boot = ss.spawn(3)
    chain = gibbs_run(data, spec, cfg.prior, cfg.gibbs)
    imputed = impute_from_chain(chain, cfg.gibbs.m,
                                np.random.default_rng(s_sel))
    state = PredictiveState.create(
        data, chain.posterior_mean(), spec, cfg.cond_draws,
        np.random.default_rng(s_comp), information=chain)
    ws = ArraysWorkspace(state, imputed)
    rng_boot = np.random.default_rng(s_boot)

    rows = []
    for kind in _build_kinds(cfg, data.p):
        res = mi_estimate(imputed, kind)
        lo_r, hi_r = rubin_ci(res, cfg.level)
        arrays = ws.arrays(kind)
        boot = bootstrap(arrays, cfg.scheme, cfg.B, rng_boot)
        lo_q, hi_q = bootstrap_ci(res.tau_mi, boot.replicates, boot.V_BS,
                                  cfg.level, style="quantile")
        lo_w, hi_w = bootstrap_ci(res.tau_mi, boot.replicates, boot.V_BS,
                                  cfg.level, style="wald")
        rows.append(AnalysisRow(
            estimator=kind.tag, point=res.tau_mi, rubin_var=res.V_mi,
            rubin_lo=lo_r, rubin_hi=hi_r, bs_var=boot.V_BS,
            bs_quantile_lo=lo_q, bs_quantile_hi=hi_q,
            bs_wald_lo=lo_w, bs_wald_hi=hi_w))
    return AnalysisReport(rows=rows, m=cfg.gibbs.m, B=cfg.B,
                          scheme=cfg.scheme.tag, mechanism=cfg.mechanism,
                          seed=cfg.seed, level=cfg.level, n=data.n, p=data.p)


def write_analysis(report: AnalysisReport, out_path, config_text: str = ""):
    """Persist an analysis as CSV plus a JSON run manifest."""
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["estimator", "point", "rubin_var", "rubin_lo",
                         "rubin_hi", "bs_var", "bs_quantile_lo",
                         "bs_quantile_hi", "bs_wald_lo", "bs_wald_hi"])
        for r in report.rows:
            writer.writerow([r.estimator] + [repr(v) for v in (
                r.point, r.rubin_var, r.rubin_lo, r.rubin_hi, r.bs_var,
                r.bs_quantile_lo, r.bs_quantile_hi, r.bs_wald_lo,
                r.bs_wald_hi)])
    manifest = {
        "seed": report.seed,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "m": report.m, "B": report.B, "scheme": report.scheme,
        "mechanism": report.mechanism, "level": report.level,
        "n": report.n, "p": report.p,
        "versions": {"miboot": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__},
    }
    out_path.with_suffix(out_path.suffix + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Synthetic applied dataset
# ---------------------------------------------------------------------------

NHANES_COLUMNS = ("age_std", "race_black", "race_hispanic", "race_other",
                  "female", "married", "poverty_ratio")


def synthesize_nhanes_like(seed: int = 12345, n: int = 4845,
                           amplified: bool = False) -> ObservedDataset:
    """Synthetic stand-in for a health-survey analysis dataset.

    Entirely simulated: n units, a 76%/24% treated/control split, four
    pre-expanded categorical confounders plus one continuous confounder
    (poverty ratio) with roughly 10% outcome-independent MNAR
    missingness. ``amplified=True`` adds further missingness (about 35%)
    driven by age, the ratio itself, and treatment.
    """
    rng = np.random.default_rng(seed)
    age = rng.uniform(-1.8, 1.8, size=n)                   # standardized age
    race = rng.choice(4, size=n, p=(0.40, 0.22, 0.23, 0.15))
    race_black = (race == 1).astype(float)
    race_hisp = (race == 2).astype(float)
    race_other = (race == 3).astype(float)
    female = (rng.random(n) < 0.52).astype(float)
    married = (rng.random(n) < 0.55 + 0.10 * (age > 0)).astype(float)
    poverty = (1.2 + 0.35 * age - 0.25 * race_black - 0.20 * race_hisp
               + 0.30 * married + 0.9 * rng.standard_normal(n))

    lin_a = (0.45 + 0.05 * age - 0.25 * race_black - 0.35 * race_hisp
             - 0.10 * race_other + 0.05 * female + 0.10 * married
             + 0.28 * poverty)
    A = (rng.random(n) < ndtr(lin_a)).astype(int)

    # Lower outcome = better satisfaction; education improves it.
    Y = (2.9 - 0.36 * A - 0.05 * age + 0.08 * race_black + 0.05 * race_hisp
         + 0.02 * female - 0.05 * married - 0.22 * poverty
         + 0.8 * rng.standard_normal(n))

    # Outcome-independent MNAR: the ratio's own value drives missingness.
    lin_r = 1.9 - 0.30 * poverty - 0.15 * A + 0.10 * age
    r_pov = (rng.random(n) < ndtr(lin_r)).astype(int)
    if amplified:
        p_extra_missing = ndtr(-0.1 - 0.04 * (2.0 + age) + 0.25 * poverty - A)
        extra = (rng.random(n) < p_extra_missing).astype(int)
        r_pov = r_pov * (1 - extra)

    X = np.column_stack([age, race_black, race_hisp, race_other, female,
                         married, poverty])
    R = np.ones_like(X, dtype=int)
    R[:, 6] = r_pov
    Xm = X.copy()
    Xm[R == 0] = np.nan
    return ObservedDataset(A=A, Y=Y, X=Xm, R=R,
                           R_Y=np.ones(n, dtype=int))


def nhanes_roles() -> ColumnRoles:
    return ColumnRoles(treatment="educ_hs", outcome="health_satisfaction",
                       confounders=NHANES_COLUMNS, missing_token="NA")
