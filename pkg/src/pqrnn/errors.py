"""Exception types shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 2,
InputError/DataError -> 3, AlignmentError -> 4, CheckpointError -> 5.
"""


class ShapeError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown option."""


class InputError(ValueError):
    """Malformed or degenerate input data."""


class DataError(InputError):
    """Dataset file cannot be parsed or fails validation."""


class AlignmentError(ValueError):
    """Teacher records and examples do not line up."""


class CheckpointError(ValueError):
    """Checkpoint file is missing, corrupt, or has the wrong format tag."""
