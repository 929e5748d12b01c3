"""Exception hierarchy shared across the package.

The three leaf categories map onto CLI exit codes: configuration/usage
problems exit 1, data problems exit 2, numeric failures exit 3.
"""


class EnergyFcError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EnergyFcError):
    """Invalid configuration, hyperparameters, or tensor shapes."""


class DataError(EnergyFcError):
    """Malformed or inconsistent input data (CSV files, checkpoints, splits)."""


class ParseError(DataError):
    """CSV parse failure; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(DataError):
    """Checkpoint document cannot be decoded; message names the field path."""


class NumericError(EnergyFcError):
    """Non-finite values where finite ones are required (inputs, gradients, losses)."""
