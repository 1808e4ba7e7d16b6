"""Exception hierarchy shared by all modules.

Each class maps onto one CLI exit code (see :mod:`rehab_assess.cli`).
"""


class RehabError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(RehabError, ValueError):
    """Bad arguments to a library call (length mismatch, empty input...)."""


class ParseError(RehabError, ValueError):
    """A sequence document could not be parsed."""


class SchemaError(RehabError, ValueError):
    """Data parsed fine but its shape does not match the declared format."""


class DataError(RehabError, ValueError):
    """Labels, annotations or scores are invalid."""


class PreprocessError(RehabError, ValueError):
    """A sequence cannot be preprocessed (e.g. zero torso length)."""


class ConfigurationError(RehabError, ValueError):
    """Invalid hyperparameters or training set composition."""


class SizingError(ConfigurationError):
    """Not enough data for the requested split sizes."""


class NumericalError(RehabError, ArithmeticError):
    """Non-finite likelihood or loss, or a non-SPD covariance."""
