"""Second-order stochastic variational inference with score-function estimators."""

__version__ = "0.1.0"

from sosvi.family import FamilyDescriptor, gaussian_family
from sosvi.models import (
    Dataset,
    LogJointModel,
    bayes_linreg,
    bayes_logreg,
    conjugate_gaussian,
    exact_kl_to_posterior,
)
from sosvi.estimators import (
    EstimatorConfig,
    GradientEstimate,
    PerSampleCurvature,
    StructuredHessian,
    densify,
    estimate_elbo,
    estimate_gradient,
    estimate_hessian_dense,
    estimate_hessian_structured,
    sample_curvature,
    structured_matvec,
)
from sosvi.optimizer import (
    ConvergenceCriterion,
    MonteCarloObjective,
    StepControl,
    QuadraticObjective,
    RunAborted,
    TraceRecord,
    iterations_to_threshold,
    run,
)

__all__ = [
    "ConvergenceCriterion",
    "Dataset",
    "EstimatorConfig",
    "FamilyDescriptor",
    "GradientEstimate",
    "LogJointModel",
    "MonteCarloObjective",
    "PerSampleCurvature",
    "QuadraticObjective",
    "RunAborted",
    "StepControl",
    "StructuredHessian",
    "TraceRecord",
    "bayes_linreg",
    "bayes_logreg",
    "conjugate_gaussian",
    "densify",
    "estimate_elbo",
    "estimate_gradient",
    "estimate_hessian_dense",
    "estimate_hessian_structured",
    "exact_kl_to_posterior",
    "gaussian_family",
    "iterations_to_threshold",
    "run",
    "sample_curvature",
    "structured_matvec",
]
