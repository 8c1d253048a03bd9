"""Cross-fitted AIPW estimation under proportional asymptotics.

Implements the 3-split cross-fit AIPW estimator for the average treatment
effect with logistic propensity-score and linear outcome-regression working
models, together with the state-evolution-based asymptotic variance that
replaces the classical formula when p/n is not small.
"""

from .config import ProblemConfig, benchmark_config
from .dgp import Dataset, SignalSet, draw_dataset, draw_signals
from .estimator import (
    PERMUTATIONS,
    CovDecomposition,
    CrossFitResult,
    PreCrossFit,
    aipw_prefit,
    crossfit_aipw,
    decompose_covariance,
)
from .nuisance import (
    LogisticFit,
    OlsFit,
    approx_loo_score,
    default_lambda_grid,
    fit_logistic,
    fit_ols,
    predict_propensity,
    select_lambda_loocv,
    winsorize,
)
from .state_evolution import (
    JointLaw,
    SeParams,
    joint_covariance,
    prox_rho,
    solve_se_mle,
    solve_se_ridge,
)
from .variance_oracle import (
    ScalarConstants,
    VarianceReport,
    between_pair_theory,
    classical_variance,
    f_ratio_curve,
    gaussian_expectation,
    scalar_constants,
    sigma_cf,
    v_between,
    v_t2,
    v_var,
    v_within,
)

__all__ = [
    "ProblemConfig",
    "benchmark_config",
    "SignalSet",
    "Dataset",
    "draw_signals",
    "draw_dataset",
    "LogisticFit",
    "OlsFit",
    "fit_logistic",
    "fit_ols",
    "predict_propensity",
    "winsorize",
    "approx_loo_score",
    "select_lambda_loocv",
    "default_lambda_grid",
    "PERMUTATIONS",
    "PreCrossFit",
    "CrossFitResult",
    "CovDecomposition",
    "aipw_prefit",
    "crossfit_aipw",
    "decompose_covariance",
    "SeParams",
    "JointLaw",
    "prox_rho",
    "solve_se_mle",
    "solve_se_ridge",
    "joint_covariance",
    "ScalarConstants",
    "VarianceReport",
    "gaussian_expectation",
    "scalar_constants",
    "v_var",
    "v_within",
    "v_between",
    "v_t2",
    "classical_variance",
    "f_ratio_curve",
    "between_pair_theory",
    "sigma_cf",
]

__version__ = "0.1.0"
