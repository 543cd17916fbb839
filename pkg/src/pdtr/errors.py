"""Exception types shared across the package.

The CLI maps these onto exit codes: DataValidationError -> 3,
NumericalError -> 4.  Everything else is a programming error.
"""


class PdtrError(Exception):
    """Base class for package errors."""


class DataValidationError(PdtrError):
    """Malformed or inconsistent input data (CSV parsing, invariant breaches)."""


class NumericalError(PdtrError):
    """Numerical failure: rank-deficient designs, undefined directions, etc."""
