"""Exception hierarchy shared by every module, plus the CLI exit codes."""
from __future__ import annotations

from typing import Optional

# === Exit codes ===
EXIT_PASS = 0
EXIT_FALSIFIED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class LabError(Exception):
    """Base class for every error raised on purpose by the lab."""


class DomainError(LabError, ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeError(LabError, ValueError):
    """Grids or dimensions of two operands do not match."""


class ScopeError(LabError, ValueError):
    """The operation is applied outside the setting it is valid for."""


class ConfigError(LabError):
    """Malformed or incomplete experiment configuration."""


class NumericError(LabError, ArithmeticError):
    """A numerical procedure could not produce a trustworthy result."""


class SingularityError(NumericError):
    """Least-squares system is rank deficient."""


class DivergenceError(NumericError):
    """A state became non-finite during integration."""

    def __init__(self, message: str, time: float, row: Optional[int] = None):
        super().__init__(message)
        self.time = time
        self.row = row


def exit_code_for(exc: BaseException) -> int:
    """Map an exception onto the CLI exit-code contract."""
    if isinstance(exc, ArithmeticError):
        return EXIT_NUMERIC
    return EXIT_CONFIG
