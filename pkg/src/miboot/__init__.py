"""miboot: causal effect estimation under missing data via multiple
imputation, with a martingale-based wild-bootstrap variance estimator."""

__version__ = "0.1.0"

from .data_model import (AIPW, IPW, MATCHING, REGRESSION, CompleteArrays,
                         EstimatorKind, ImputedDataset, ObservedDataset,
                         ThetaParams, validate)
from .errors import (ConfigError, DataFormatError, EstimationError,
                     GibbsError, MibootError)
from .estimators import (InfluenceVector, NuisanceFit, fit_nuisance,
                         full_sample_variance, influence, ratio_estimand,
                         tau_point)
from .imputer import (GibbsChain, GibbsConfig, JointModelSpec, PriorSpec,
                      draw_completions, gibbs_run, impute_from_chain,
                      multiply_impute, predictive_conditional)
from .mi_engine import MIResult, mi_estimate, rubin_ci
from .sim_harness import ScenarioSpec, StudyReport, emit, generate, run_study
from .wild_bootstrap import (MAMMEN, MULTINOMIAL, NORMAL, RADEMACHER,
                             MartingaleArrays, WeightScheme, bootstrap,
                             bootstrap_ci, build_arrays, draw_weights,
                             gamma_hat, mean_score, obs_information,
                             obs_information_numeric)

__all__ = [name for name in dir() if not name.startswith("_")]
