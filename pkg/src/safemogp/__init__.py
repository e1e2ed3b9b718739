"""Safe active learning with multi-output Gaussian processes (linear model of coregionalization)."""

__version__ = "0.1.0"

from .acquisition import (
    entropy_score,
    evaluate_metrics,
    random_safe_query,
    run_safe_al,
    safe_query,
    safety_probability,
)
from .config import ExperimentConfig, ObservationMode, Pipeline, SafetySpec, ZMode, load_config
from .gp_models import (
    GPPosterior,
    ObservationSet,
    PosteriorGaussian,
    lml_gradient,
    log_marginal_likelihood,
    mogp_posterior_full,
    mogp_posterior_partial,
    so_posterior,
)
from .inference import HmcSettings, HyperPrior, hmc_sample, mixture_moment_match, optimize_hyperparameters
from .kernels import ConvProcessModel, KernelFamily, KernelSpec, LmcModel, assemble_gram, conv_cov, eval_kernel, lmc_cov
