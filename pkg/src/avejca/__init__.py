"""Recursive audio-visual fusion by joint co-attention, on a small numpy autograd."""

from .config import RunConfig, load_config
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .model import JcaModel, count_parameters, mlsm_loss, segment_accuracy

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "JcaModel",
    "RunConfig",
    "count_parameters",
    "load_config",
    "mlsm_loss",
    "segment_accuracy",
]
__version__ = "0.1.0"
