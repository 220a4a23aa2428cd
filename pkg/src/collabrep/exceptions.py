"""Exception types shared across the package."""

from sklearn.exceptions import ConvergenceWarning

__all__ = ["DatasetError", "NumericalError", "ConvergenceWarning"]


class DatasetError(ValueError):
    """Raised for malformed or inconsistent input data.

    ``row`` and ``column`` locate the offending cell when known (1-based
    data row, header name or 0-based column index).
    """

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class NumericalError(ArithmeticError):
    """Raised when an iteration produces non-finite values."""
