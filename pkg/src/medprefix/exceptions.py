"""Exception hierarchy.

Everything raised deliberately by the package derives from
:class:`MedPrefixError`, so callers (the CLI in particular) can separate
operational failures from programming errors.
"""


class MedPrefixError(Exception):
    """Base class for all package errors."""


class DimensionError(MedPrefixError, ValueError):
    """Tensor or vector extents do not match what an operation requires."""


class NonFiniteError(MedPrefixError, FloatingPointError):
    """An operation produced NaN or Inf."""


class InvalidBatchError(MedPrefixError, ValueError):
    """A loss was requested over a batch with no scored positions."""


class DeterminismError(MedPrefixError, RuntimeError):
    """A function that must be deterministic returned different values."""


class TrainingStateError(MedPrefixError, RuntimeError):
    """Optimizer state is inconsistent, e.g. a trainable parameter lacks a gradient."""


class EmptyReportError(MedPrefixError, ValueError):
    """Nothing of a report survived preprocessing."""


class InvalidCorpusError(MedPrefixError, ValueError):
    pass


class ParseError(MedPrefixError, ValueError):
    """A dataset or vocabulary file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateBasisError(MedPrefixError, RuntimeError):
    pass


class InvalidSampleError(MedPrefixError, ValueError):
    pass


class ConfigError(MedPrefixError, ValueError):
    pass


class LengthError(MedPrefixError, ValueError):
    """A sequence does not fit in the model's context window."""


class FormatError(MedPrefixError, ValueError):
    """A checkpoint file is corrupt or truncated."""


class VersionError(MedPrefixError, ValueError):
    """A checkpoint was written by an incompatible format version."""


class InvalidInputError(MedPrefixError, ValueError):
    pass
