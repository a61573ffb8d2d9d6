"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class CheckpointError(FormatError):
    """A checkpoint file could not be read or does not match the model."""
