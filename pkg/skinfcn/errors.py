"""
Exception hierarchy shared by the engine, the data pipeline and the CLI.
"""


class SkinFCNError(Exception):
    """Root of every error raised by skinfcn."""


class ShapeError(SkinFCNError, ValueError):
    """A tensor shape or convolution geometry violates an operator contract."""


class ParameterError(SkinFCNError, ValueError):
    """A scalar argument is outside its valid range."""


class ContractError(SkinFCNError, RuntimeError):
    """The API was used out of order (double backward, non-scalar loss, ...)."""


class NumericError(SkinFCNError, FloatingPointError):
    """An operation produced NaN or Inf while finite checking is enabled."""


class ConfigError(SkinFCNError, ValueError):
    """An architecture or run configuration is invalid."""


class DataError(SkinFCNError, ValueError):
    """Input data (images, masks, manifests) is unusable.

    Args:
        message: Human readable description.
        path: Offending file, when known.
    """

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        if path is not None:
            message = f"{message} ({path})"
        super().__init__(message)


class FormatError(DataError):
    """A checkpoint file is malformed.

    Args:
        field: Name of the checkpoint field that failed to parse.
        message: Human readable description.
        path: Checkpoint path, when known.
    """

    def __init__(self, field: str, message: str, path: str | None = None):
        self.field = field
        super().__init__(f"invalid checkpoint field '{field}': {message}", path)
