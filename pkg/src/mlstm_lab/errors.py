"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.  Plain ValueError/IndexError from the math layer mean a
programming error at the call site, not a user-facing failure.
"""


class MlstmLabError(Exception):
    """Base class for all user-facing failures."""


class ConfigError(MlstmLabError):
    """Invalid configuration, flags or dimension request."""


class DataError(MlstmLabError):
    """Unreadable, malformed or out-of-vocabulary data, corrupt checkpoint."""


class NumericError(MlstmLabError):
    """Non-finite value encountered where training must abort."""

    def __init__(self, message, step=None, tensor=None):
        super().__init__(message)
        self.step = step
        self.tensor = tensor
