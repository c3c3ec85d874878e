"""Exception types shared across the package.

Every error raised deliberately by this package derives from
:class:`StyleAllocError`, so callers can catch one base class at the
boundary (the CLI does exactly that).
"""

from __future__ import annotations


class StyleAllocError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(StyleAllocError):
    """An array argument has a shape incompatible with its parameters."""


class OrderingViolation(StyleAllocError):
    """Stick-breaking coefficients are not strictly ascending down a column."""


class InvalidSimplex(StyleAllocError):
    """A weight vector has negative entries or does not sum to one."""


class NonPdCovariance(StyleAllocError):
    """A covariance factor is not a valid lower Cholesky factor."""


class EmptyData(StyleAllocError):
    """An operation that needs observations received none."""


class InnerOptFailure(StyleAllocError):
    """An inner numerical optimization failed to produce a usable step."""


class NoValidRestart(StyleAllocError):
    """Every restart of an iterative fit failed."""


class AllZeroRow(StyleAllocError):
    """A responsibility or count row is entirely zero where mass is required."""


class InsufficientDataPerFold(StyleAllocError):
    """Cross-validation folds cannot be formed from the available data."""


class DegenerateGrid(StyleAllocError):
    """A density evaluation grid has no area or too few cells."""


class DegenerateWeights(StyleAllocError):
    """Importance weights carry no usable tail information."""


class ParseError(StyleAllocError):
    """A text input failed to parse.

    Parameters
    ----------
    reason : str
        Human-readable description of the problem.
    row : int or None
        1-based data row number (header excluded) when known.
    column : str or None
        Column name when known.
    """

    def __init__(self, reason, row=None, column=None):
        self.reason = reason
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{reason}{suffix}")


class UnknownEnumValue(ParseError):
    """A categorical field holds a value outside its allowed set."""


class VersionMismatch(StyleAllocError):
    """A file declares a schema version this code does not understand."""


class MixedServeNumbers(StyleAllocError):
    """First- and second-serve records were combined into one dataset."""
