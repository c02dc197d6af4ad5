"""Doubly-robust multivalued treatment effects with group-lasso selection."""

from .data import (
    Dataset,
    DesignMatrix,
    ExpansionSpec,
    expand_features,
    load_csv,
    parse_expansion_config,
    standardize,
)
from .diagnostics import (
    restricted_eig_estimate,
    sparse_eig,
    support_tracking,
)
from .effects import (
    ConfidenceInterval,
    EffectEstimate,
    LinearContrast,
    NuisanceEstimates,
    TotEstimate,
    ci_functional,
    estimate_mu,
    estimate_mu_cond,
    estimate_tau,
    influence_values,
    normal_quantile,
    nuisances_from_refits,
    parse_contrast,
    trim_overlap,
    variance_mu,
    variance_tau,
)
from .penalty import (
    PenaltyConfig,
    concentration_probability,
    cv_lambda,
    iterate_noise_scale,
    lambda_d,
    lambda_y,
)
from .pipeline import PipelineSettings, fit_nuisances, forced_indices
from .refit import RefitPlan, refit_linear, refit_logistic
from .simulate import (
    CoverageReport,
    DgpConfig,
    coverage_study,
    gen_dgp,
    oracle_nuisances,
    run_replication,
)
from .solver import (
    LinearGroupLassoFit,
    LogisticGroupLassoFit,
    SolverConfig,
    fit_grouplasso_linear,
    fit_grouplasso_logistic,
    group_prox,
    kkt_residuals,
    linear_objective,
    logistic_objective,
    mlogit_probs,
)

__version__ = "0.1.0"
