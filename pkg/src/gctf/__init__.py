"""Dual-branch video state-space classifier with gated class-token fusion."""

from .config import ConfigError, ModelConfig, load_config, paper_config
from .costs import count_flops, count_params
from .model import DualBranchModel, grad_cam, lateral_schedule
from .tensor import NonFiniteError, Parameter, Tensor, backward, finite_diff_check, no_grad
from .train import mcnemar_exact, train_loop

__all__ = [
    "ConfigError", "ModelConfig", "load_config", "paper_config",
    "count_flops", "count_params",
    "DualBranchModel", "grad_cam", "lateral_schedule",
    "NonFiniteError", "Parameter", "Tensor", "backward", "finite_diff_check", "no_grad",
    "mcnemar_exact", "train_loop",
]

__version__ = "0.1.0"
