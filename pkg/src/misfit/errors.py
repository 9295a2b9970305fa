"""Exception types raised across the package."""

from __future__ import annotations


class InvalidArgumentError(ValueError):
    """An input is outside its domain.

    Args:
        field: Name of the offending argument or configuration key.
        message: Human-readable explanation.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericalFailureError(ArithmeticError):
    """A numerical routine could not deliver a result of the requested accuracy.

    Diagnostics such as the last residual, the smallest eigenvalue or the
    parameter value reached are stored in ``diagnostics`` so callers can
    report them without parsing the message.
    """

    def __init__(self, message: str, **diagnostics):
        self.diagnostics = diagnostics
        if diagnostics:
            detail = ", ".join(f"{k}={v!r}" for k, v in diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)
