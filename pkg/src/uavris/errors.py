"""Exception types shared across the package."""


class UavrisError(Exception):
    """Base class for all package errors."""


class ShapeError(UavrisError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(UavrisError, ValueError):
    """A call violated an operation's documented precondition."""


class ConfigurationError(UavrisError, ValueError):
    """A configuration value is out of its legal range."""


class DegenerateInputError(UavrisError, ValueError):
    """Input is too small for the statistic to be defined."""


class NonFiniteError(UavrisError, FloatingPointError):
    """A tensor acquired NaN or Inf values."""


class TapeError(UavrisError, RuntimeError):
    """Backward was asked for on a consumed, empty, or unrelated tape."""


class OracleError(UavrisError, RuntimeError):
    """The finite-difference oracle detected a non-deterministic target."""


class TrainingError(UavrisError, RuntimeError):
    """Training diverged; carries the iteration at which it happened."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class IngestionError(UavrisError, ValueError):
    """Source imagery cannot enter the dataset pipeline."""


class ProviderError(UavrisError, RuntimeError):
    """The caption provider failed after all retries."""


class ExportError(UavrisError, RuntimeError):
    """Annotation export failed (I/O or identifier collision)."""
