"""Probability-preserving samplers over analytic Gaussian-mixture targets.

Modules:
    targets   mixture densities, scores, smoothing, Tweedie denoisers, sampling
    bridges   bridge schedules, exact velocity fields, flow-to-denoiser maps, ODE steps
    samplers  ULA, MALA, denoiser-Metropolis (dMALA), predictor-corrector, chain runner
    learn     small MLP with manual derivatives and its training objectives
    metrics   NLL, MMD, mean move, ablation tables
    cli       command-line driver
"""

from .errors import ConfigError, NumericalError
from .targets import (
    IsotropicGaussianMixture,
    SwissRollSpec,
    log_density,
    sample,
    score,
    smooth,
    swiss_roll_target,
    tweedie_denoiser,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "IsotropicGaussianMixture",
    "NumericalError",
    "SwissRollSpec",
    "log_density",
    "sample",
    "score",
    "smooth",
    "swiss_roll_target",
    "tweedie_denoiser",
]
