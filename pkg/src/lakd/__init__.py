"""Local attention knowledge distillation on a small numpy autograd engine."""

from .autograd import Tape, Tensor, backward, no_grad
from .config import RunConfig
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, FormatError
from .models import TapNet, build_tapnet, forward_with_taps, load_checkpoint, save_checkpoint
from .sdm import PartitionPlan, partition, sdm_step

__all__ = [
    "Tape", "Tensor", "backward", "no_grad", "RunConfig",
    "CheckpointError", "ConfigError", "ContractError", "DimensionError", "FormatError",
    "TapNet", "build_tapnet", "forward_with_taps", "load_checkpoint", "save_checkpoint",
    "PartitionPlan", "partition", "sdm_step",
]
