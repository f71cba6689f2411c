"""
Exception hierarchy shared by the library and the CLI.

Validation problems are ValueErrors, numerical failures are ArithmeticErrors
and file problems are OSErrors, so the CLI can map each family to its exit code.
"""


class ConfigError(ValueError):
    """Invalid or unknown configuration value; the message names the key path."""


class UnsupportedSizeError(ValueError):
    """An FFT axis is not a power of two."""


class ResolutionError(ValueError):
    """A residual grid is coarser than a pyramid level and aliasing was not allowed."""


class DomainError(ValueError):
    """An input lies outside the domain of an operation (NaN, t outside [0, 1], ...)."""


class ShapeError(ValueError):
    """Array shapes or component counts do not agree."""


class UnsupportedDerivativeError(ValueError):
    """A derivative request cannot be served (order above 3 or a mixed index)."""


class UnsupportedPrimitiveError(ValueError):
    """A jet was asked to propagate through an unknown elementary function."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for its inputs (for example a zero reference norm)."""


class NumericalError(ArithmeticError):
    """Base class for NaN/Inf failures during training or evaluation."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class PoisonedGradientError(NumericalError):
    """A non-finite value appeared during the backward pass."""

    def __init__(self, message, node_index=None, opcode=None, dump=None):
        super().__init__(message, dump)
        self.node_index = node_index
        self.opcode = opcode


class PoisonedStepError(NumericalError):
    """An optimizer step received a non-finite gradient; the state was left unchanged."""


class PoisonedLossError(NumericalError):
    """A loss evaluated to NaN or Inf."""


class FileFormatError(OSError):
    """Base class for malformed artifact files."""


class ReferenceFormatError(FileFormatError):
    """A reference-solution file is malformed, truncated or corrupted."""


class CheckpointError(FileFormatError):
    """A checkpoint file is malformed, truncated or corrupted."""
