"""Exception hierarchy shared across the package."""


class ApnetError(Exception):
    """Base class for every error raised by apnet."""


class ShapeError(ApnetError, ValueError):
    """Tensor dimensions do not fit the operation."""


class DataError(ApnetError, ValueError):
    """Input values are outside their documented domain (e.g. class ids)."""


class NumericError(ApnetError, ArithmeticError):
    """A numerical routine hit a degenerate configuration."""


class ConfigError(ApnetError, ValueError):
    """A configuration record failed validation."""


class DecodeError(ApnetError, OSError):
    """A file on disk could not be decoded."""


class UndefinedMetricError(ApnetError, ValueError):
    """A metric has no defined value (e.g. every class absent)."""


class GenerationError(ApnetError, RuntimeError):
    """The synthetic generator could not satisfy its spec."""


class TrainingDivergedError(ApnetError, FloatingPointError):
    """Training produced a non-finite loss."""
