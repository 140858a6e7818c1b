"""Unbiased simulated gradients for composition optimization.

Minimizes ``F(x) = E_v[ f_v(E_w g_w(x)) + h_v(x) ]`` by simulating
unbiased gradients with a randomized multilevel Monte Carlo scheme and
feeding them to variance-reduced optimizers.  Built-in problems include
a synthetic strongly convex family with closed-form oracles and the
ridge-regularized Cox partial likelihood over simulated survival data.
"""
from .core import (
    CompositionProblem,
    FiniteInner,
    FiniteOuter,
    InnerBatchStats,
    StochasticInner,
    StochasticOuter,
    UnsupportedFamilyError,
    exact_component_gradient,
    exact_full_gradient,
    exact_inner_mean,
    exact_objective,
)
from .estimators import (
    EstimatorConfig,
    EstimatorDiagnostics,
    GradientOverflowError,
    GradientSample,
    coupled_gradient_pair,
    draw_level_stats,
    estimator_diagnostics,
    expected_inner_cost,
    geometric_level_pmf,
    level_estimator_value,
    sample_level,
    sample_truncated_level,
    truncated_level_pmf,
    unbiased_gradient,
    unbiased_gradient_finite,
    variance_reduced_gradient,
)
from .optimizers import (
    EpochRecord,
    ReferenceSolution,
    RunTrace,
    ScsgConfig,
    SvrgConfig,
    gradient_descent,
    reference_minimum,
    simulated_scsg,
    simulated_sgd,
    simulated_svrg,
)
from .problems import (
    CoxDataset,
    CoxProblem,
    SyntheticComposition,
    cox_full_gradient,
    cox_objective,
    cox_problem,
    generate_cox_data,
    generate_synthetic,
    load_cox_csv,
    make_cox_dataset,
    save_cox_csv,
)
from .rng import RandomSource

__all__ = [
    "CompositionProblem",
    "CoxDataset",
    "CoxProblem",
    "EpochRecord",
    "EstimatorConfig",
    "EstimatorDiagnostics",
    "FiniteInner",
    "FiniteOuter",
    "GradientOverflowError",
    "GradientSample",
    "InnerBatchStats",
    "RandomSource",
    "ReferenceSolution",
    "RunTrace",
    "ScsgConfig",
    "StochasticInner",
    "StochasticOuter",
    "SvrgConfig",
    "SyntheticComposition",
    "UnsupportedFamilyError",
    "coupled_gradient_pair",
    "cox_full_gradient",
    "cox_objective",
    "cox_problem",
    "draw_level_stats",
    "estimator_diagnostics",
    "exact_component_gradient",
    "exact_full_gradient",
    "exact_inner_mean",
    "exact_objective",
    "expected_inner_cost",
    "generate_cox_data",
    "generate_synthetic",
    "geometric_level_pmf",
    "gradient_descent",
    "level_estimator_value",
    "load_cox_csv",
    "make_cox_dataset",
    "reference_minimum",
    "sample_level",
    "sample_truncated_level",
    "save_cox_csv",
    "simulated_scsg",
    "simulated_sgd",
    "simulated_svrg",
    "truncated_level_pmf",
    "unbiased_gradient",
    "unbiased_gradient_finite",
    "variance_reduced_gradient",
]

__version__ = "0.1.0"
