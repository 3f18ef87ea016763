# photostep_core/exceptions.py
"""
Custom exception classes for the photostep core library.

These exceptions provide more specific error information than built-in
exceptions, allowing for more targeted error handling by callers.
All custom exceptions inherit from the base `PhotostepError`.
"""
from __future__ import annotations

from typing import Optional


class PhotostepError(Exception):
    """Base exception for photostep core errors."""

    pass


class ConfigError(PhotostepError):
    """Errors related to configuration loading, saving, or validation."""

    pass


class ValidationError(PhotostepError):
    """Errors for invalid user input or data formats."""

    pass


class DegenerateConfigurationError(PhotostepError):
    """Two change points coincide, so the location prior has no density."""

    pass


class InvalidConfigurationError(PhotostepError):
    """A dwelling holds no frames. Moves treat this as an automatic rejection."""

    pass


class ConvergenceError(PhotostepError):
    """Errors for inputs the convergence machinery cannot work with."""

    pass


class TraceFormatError(PhotostepError):
    """A trace file could not be parsed; carries the offending location."""

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        line: Optional[int] = None,
        column: Optional[int] = None,
    ):
        self.path = path
        self.line = line
        self.column = column
        where = ":".join(str(p) for p in (path, line, column) if p is not None)
        super().__init__(f"{where}: {message}" if where else message)
