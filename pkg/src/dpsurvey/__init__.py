"""Differentially private survey-weighted mean estimation with data-adaptive weight shrinkage."""

from .core import (
    Bounds,
    DomainError,
    SampleSummary,
    SurveySample,
    ValidationError,
    approx_ht_variance,
    bias_inverse_dminus,
    classical_interval,
    dp_mse_loss,
    min_feasible_awd,
    min_feasible_rho,
    optimal_lambda,
    regularized_mean,
    unweighted_mean,
    weighted_mean,
)
from .mechanisms import PrivacyBudget, RandomSource, exp_mech_lambda, gaussian_mechanism
from .algorithms import (
    DiscrepancySignPolicy,
    DpIntervalRelease,
    DpMeanRelease,
    concentration_bound_cstar,
    dp_confidence_interval,
    dp_regularized_estimate,
    dp_sign_estimate,
    plugin_bias_adjust,
)

__version__ = "0.1.0"
