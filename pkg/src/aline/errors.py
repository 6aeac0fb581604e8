"""Exception hierarchy shared by the library and the command line."""

from __future__ import annotations


class AlineError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(AlineError, ValueError):
    """Malformed or inconsistent input data.

    ``model_id`` and ``row`` point at the offending model and example row
    when the error can be localized.
    """

    def __init__(self, message: str, *, model_id: str | None = None, row: int | None = None):
        self.model_id = model_id
        self.row = row
        where = []
        if model_id is not None:
            where.append(f"model {model_id!r}")
        if row is not None:
            where.append(f"row {row}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DegenerateError(AlineError, ArithmeticError):
    """A computation is not defined for the given data (e.g. constant regressor)."""
