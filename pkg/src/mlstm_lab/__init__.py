"""Byte-level sequence-modelling lab: multiplicative LSTM and baselines with
hand-derived truncated BPTT, on numpy with optional numba-compiled kernels."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, MlstmLabError, NumericError

__all__ = [
    "ConfigError",
    "DataError",
    "MlstmLabError",
    "NumericError",
    "__version__",
]
