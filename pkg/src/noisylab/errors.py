"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: DataError -> 2, NumericalError -> 3,
anything argparse-level -> 1.
"""


class NoisyLabError(Exception):
    """Base class for all package errors."""


class DataError(NoisyLabError):
    """Malformed or inconsistent input data."""


class NoResults(DataError):
    """A results directory contains nothing to report on."""


class DegenerateHistogram(NoisyLabError):
    """Image histogram carries no usable signal (e.g. constant image)."""


class UndefinedAuc(NoisyLabError):
    """AUC requested for labels containing only one class."""


class NumericalError(NoisyLabError):
    """Non-finite values or a numerically impossible operation."""
