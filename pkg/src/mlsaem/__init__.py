"""SAEM estimation for nonlinear mixed-effects models with subject and unit-within-subject random effects."""

from .core import Dataset, ThetaParams, gamma_matrix, parameter_names, posterior_b_moments
from .inference import (
    FimResult,
    LoglikEstimate,
    importance_sampling_loglik,
    linearized_fim,
    lrt,
    wald_test,
)
from .io import demo_paths, load_config, read_dataset, write_dataset
from .models import NLMEModel, get_model
from .saem import FitResult, SaemConfig, run_saem
from .sampler import KernelConfig
from .trial import ReplicationReport, TrialDesign, replicate_study, simulate_trial

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FimResult",
    "FitResult",
    "KernelConfig",
    "LoglikEstimate",
    "NLMEModel",
    "ReplicationReport",
    "SaemConfig",
    "ThetaParams",
    "TrialDesign",
    "demo_paths",
    "gamma_matrix",
    "get_model",
    "importance_sampling_loglik",
    "linearized_fim",
    "load_config",
    "lrt",
    "parameter_names",
    "posterior_b_moments",
    "read_dataset",
    "replicate_study",
    "run_saem",
    "simulate_trial",
    "wald_test",
    "write_dataset",
]
