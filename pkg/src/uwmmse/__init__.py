"""WMMSE beamforming, truncated WMMSE and the unfolded learnable variant."""

from .channels import ChannelSpec, Family, generate, read_dataset, write_dataset
from .neural import ModelParams, init_params, unfolded_forward
from .training import TrainConfig, load_checkpoint, save_checkpoint, train
from .wmmse import InterferenceMode, ProblemConfig, sum_rate, user_rate, wmmse_solve

__version__ = "0.1.0"

__all__ = [
    "ChannelSpec",
    "Family",
    "InterferenceMode",
    "ModelParams",
    "ProblemConfig",
    "TrainConfig",
    "generate",
    "init_params",
    "load_checkpoint",
    "read_dataset",
    "save_checkpoint",
    "sum_rate",
    "train",
    "unfolded_forward",
    "user_rate",
    "wmmse_solve",
    "write_dataset",
]
