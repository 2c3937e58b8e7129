"""Exception types shared across the package."""


class RegionCLError(Exception):
    """Base class for package errors."""


class ContractError(RegionCLError, ValueError):
    """A documented precondition was violated."""


class DimensionError(ContractError):
    """Tensor shapes do not conform."""


class NonFiniteError(RegionCLError, FloatingPointError):
    """NaN or Inf where finite values are required."""


class ConfigError(ContractError):
    """Invalid configuration value or unknown key."""


class FormatError(RegionCLError):
    """Malformed on-disk artifact."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class UnsupportedVersionError(FormatError):
    pass


class TrainingDivergedError(RegionCLError):
    """Loss became non-finite during training; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        self.diagnostics = diagnostics
        super().__init__(f"{message}: {diagnostics}")


class StageError(RegionCLError):
    """A pipeline stage is missing an input artifact or saw a hash mismatch."""
