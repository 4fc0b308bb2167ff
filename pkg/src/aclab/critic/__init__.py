"""Off-policy multi-step TD critic: factor schemes, analytic operators, stochastic runs and bounds."""

from aclab.critic.bounds import (
    max_constant_stepsize,
    min_diminishing_offset,
    stepsize_cap,
    theoretical_bound_curve,
)
from aclab.critic.factors import (
    IsFactorTable,
    StabilityReport,
    gamma_tilde,
    lambda_for_variance_cap,
    make_factors,
    make_lambda_factors,
    make_on_policy_factors,
    make_two_sided_factors,
    make_vanilla_factors,
    stability_report,
    variance_parameter,
)
from aclab.critic.operators import (
    BiasBound,
    CriticModel,
    GeneralizedBellman,
    bias_bound,
    generalized_bellman,
    pbe_fixed_point,
    q_fixed_point,
)
from aclab.critic.td import CriticBatch, CriticConfig, CriticRun, td_iterate, td_run, td_run_batch

__all__ = [
    "BiasBound",
    "CriticBatch",
    "CriticConfig",
    "CriticModel",
    "CriticRun",
    "GeneralizedBellman",
    "IsFactorTable",
    "StabilityReport",
    "bias_bound",
    "gamma_tilde",
    "generalized_bellman",
    "lambda_for_variance_cap",
    "make_factors",
    "make_lambda_factors",
    "make_on_policy_factors",
    "make_two_sided_factors",
    "make_vanilla_factors",
    "max_constant_stepsize",
    "min_diminishing_offset",
    "pbe_fixed_point",
    "q_fixed_point",
    "stability_report",
    "stepsize_cap",
    "td_iterate",
    "td_run",
    "td_run_batch",
    "theoretical_bound_curve",
    "variance_parameter",
]
