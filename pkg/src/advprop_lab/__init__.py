"""Desk-scale AdvProp laboratory."""

from .attacks import AttackSpec, attack, default_spec, input_gradient
from .autodiff import Tape, Tensor, backward, finite_diff_check
from .layers import DeskNet, DualBatchNorm, build_desknet, dual_bn_forward, model_forward, param_count
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "DeskNet", "DualBatchNorm", "Tape", "Tensor", "TrainConfig", "attack", "backward",
    "build_desknet", "default_spec", "dual_bn_forward", "finite_diff_check", "input_gradient",
    "model_forward", "param_count", "train",
]
