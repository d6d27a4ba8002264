"""Squeeze-aggregated-excitation networks on a from-scratch numpy autograd."""
from .errors import (ConfigurationError, ContractError, DataFormatError, DegenerateBatchError,
                     DimensionError, NumericalError, SaenetError)
from .nn import Bottleneck, SaEConfig, SaEGate, SEGate
from .zoo import ArchSpec, build, param_count, preset

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "Bottleneck", "ConfigurationError", "ContractError", "DataFormatError",
    "DegenerateBatchError", "DimensionError", "NumericalError", "SaEConfig", "SaEGate", "SEGate",
    "SaenetError", "build", "param_count", "preset",
]
