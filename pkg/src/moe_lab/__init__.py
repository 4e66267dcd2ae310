"""Mixture-of-Experts classifier heads with routing, balancing losses and curvature tools."""

from .autodiff import Tensor, backward, grad_and_hvp, hvp, no_grad, value_and_grad
from .data import Dataset, normalize, parse_cifar10_binary, split, synth_clusters
from .errors import ConfigError, FormatError, InternalError, MoELabError, NumericError, UsageError
from .model import ModelConfig, build, count_flops, load_checkpoint, save_checkpoint
from .rng import Rng
from .train import TrainConfig, epoch_to_threshold, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_and_hvp", "hvp", "no_grad", "value_and_grad",
    "Dataset", "normalize", "parse_cifar10_binary", "split", "synth_clusters",
    "ConfigError", "FormatError", "InternalError", "MoELabError", "NumericError", "UsageError",
    "ModelConfig", "build", "count_flops", "load_checkpoint", "save_checkpoint",
    "Rng", "TrainConfig", "epoch_to_threshold", "sgd_step", "train",
]
