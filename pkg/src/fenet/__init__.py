"""FENet: multi-frequency dilated CNN for apnea detection on discontinuous RR epochs."""

from fenet._kernels import BACKEND
from fenet.errors import ConfigError, FenetError, FormatError, InvalidInputError, NumericError

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "FenetError",
    "FormatError",
    "InvalidInputError",
    "NumericError",
]
