"""Latent Gaussian point-process and log-size models."""

from .formula import PRESETS, ConfigError, ModelSpec, Term, apply_transform, parse_model_config, preset
from .inference import DivergenceError, Posterior, fit, sample_posterior
from .latent import LatentModel, PointData, build_design, rw2_structure
from .predict import (Prediction, linear_predictor, population_cv, posterior_summary,
                      predict_raster, write_posterior_summary)

__all__ = [
    "PRESETS", "ConfigError", "ModelSpec", "Term", "apply_transform", "parse_model_config",
    "preset", "DivergenceError", "Posterior", "fit", "sample_posterior", "LatentModel",
    "PointData", "build_design", "rw2_structure", "Prediction", "linear_predictor",
    "population_cv", "posterior_summary", "predict_raster", "write_posterior_summary",
]
