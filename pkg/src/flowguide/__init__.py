"""Flow-matching velocity models trained with EMA-based model guidance.

A small numpy autodiff engine drives MLP / AdaLN-transformer velocity nets on
synthetic conditional tasks whose true distributions are known in closed form.
"""
from .tensor_core import Tensor, backward, finite_diff_gradient, stop_gradient
from .nets import VelocityNet, VelocityNetConfig
from .objectives import AlignConfig, GuidanceConfig
from .samplers import SamplerConfig, sample_model
from .trainer import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "AlignConfig", "GuidanceConfig", "SamplerConfig", "Tensor", "TrainConfig", "Trainer", "VelocityNet",
    "VelocityNetConfig", "backward", "finite_diff_gradient", "sample_model", "stop_gradient", "train",
]
