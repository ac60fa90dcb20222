"""Exact posterior sampling for multi-response Bayesian GLMMs."""

from .dy import DyFamily, DyKind, DyParams, dy_log_density, dy_mean_variance, dy_posterior_update, dy_sample
from .errors import EprError
from .gcm import (
    BlockDiagonal,
    DenseMap,
    GcmSpec,
    TruncationRegion,
    cgcm_log_density_given_theta,
    gcm_log_density_given_theta,
    gcm_sample,
    truncated_gcm_sample,
)
from .model import (
    DataBlock,
    EffectPrior,
    GlmmSpec,
    QPrior,
    ThetaPrior,
    ThetaPriorComponent,
    assemble_posterior,
    car_precision,
    marginalize_gaussian_variance,
    mcar_covariance_chol,
    rho_bounds,
    sample_theta,
)
from .projection import IDENTITY, apply_projection, build_projection, dense_block_inverse, residual_g
from .sampler import DrawSet, EprConfig, epr_run, joint_credible_region, simulate_w, summarize

__all__ = [
    "DyFamily",
    "DyKind",
    "DyParams",
    "dy_log_density",
    "dy_mean_variance",
    "dy_posterior_update",
    "dy_sample",
    "EprError",
    "BlockDiagonal",
    "DenseMap",
    "GcmSpec",
    "TruncationRegion",
    "cgcm_log_density_given_theta",
    "gcm_log_density_given_theta",
    "gcm_sample",
    "truncated_gcm_sample",
    "DataBlock",
    "EffectPrior",
    "GlmmSpec",
    "QPrior",
    "ThetaPrior",
    "ThetaPriorComponent",
    "assemble_posterior",
    "car_precision",
    "marginalize_gaussian_variance",
    "mcar_covariance_chol",
    "rho_bounds",
    "sample_theta",
    "IDENTITY",
    "apply_projection",
    "build_projection",
    "dense_block_inverse",
    "residual_g",
    "DrawSet",
    "EprConfig",
    "epr_run",
    "joint_credible_region",
    "simulate_w",
    "summarize",
]

__version__ = "0.1.0"
