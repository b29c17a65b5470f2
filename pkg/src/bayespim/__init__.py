"""Bayesian prevalence-incidence mixture models for interval-censored screening data."""

__version__ = "0.1.0"

from .core_model import (  # noqa: E402
    AftFamily,
    Dataset,
    IncidenceParams,
    KappaPrior,
    ModelParams,
    ModelSpec,
    PrevalenceParams,
    PriorConfig,
    ScreeningRecord,
    Sensitivity,
)
from .gibbs import PosteriorDraws, SamplerConfig, SamplerResult, run_sampler  # noqa: E402

__all__ = [
    "AftFamily",
    "Dataset",
    "IncidenceParams",
    "KappaPrior",
    "ModelParams",
    "ModelSpec",
    "PosteriorDraws",
    "PrevalenceParams",
    "PriorConfig",
    "SamplerConfig",
    "SamplerResult",
    "ScreeningRecord",
    "Sensitivity",
    "run_sampler",
]
