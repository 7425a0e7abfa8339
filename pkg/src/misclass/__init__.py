"""Bayesian adjustment for misclassified binary covariates and responses."""

from .core import (
    IDENTITY,
    CovariateDependentMC,
    Dataset,
    DifferentialMC,
    ExposureModel,
    FixedNoise,
    GlmSpec,
    MisclassMatrix,
    NIGNoise,
    UniformMC,
    estimate_mc_from_validation,
    exposure_probability,
    mc_matrix_for_observation,
    validate_mc_matrix,
)
from .covariate import (
    WeightedPosterior,
    aggregate_mixture_quantile,
    conditional_success_probability,
    normalize_weights,
    run_importance_sampling,
    sample_latent_covariate,
)
from .glm import ConditionalFit, fit_conjugate_linear, fit_laplace_glm, posterior_quantile
from .latent_gaussian import (
    LatentGaussianData,
    LatentGaussianFit,
    LatentGaussianModel,
    fit_latent_gaussian,
    joint_neg_log_posterior,
    probit_misclass_probability,
)
from .oracle import EnumerationResult, enumerate_exact_posterior, exact_vs_is_distance
from .response import (
    MergedPosterior,
    SensSpecGrid,
    fit_response_mc,
    marginal_success_probability,
    marginalize_sens_spec,
    sslogit_inverse,
    true_success_probability,
)

__version__ = "0.1.0"
