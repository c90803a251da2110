"""Exception hierarchy shared by all solver modules."""

from __future__ import annotations


class GPPIError(Exception):
    """Base class for every error raised by the package."""


class KernelError(GPPIError, ValueError):
    """Invalid kernel/operator pairing or point dimension mismatch."""

    def __init__(self, message: str, axis: int | None = None):
        super().__init__(message)
        self.axis = axis


class SingularSystemError(GPPIError, ArithmeticError):
    """A normal or increment matrix could not be factored even after regularization."""

    def __init__(self, message: str, condition: float = float("inf"), block: str | None = None):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition
        self.block = block


class ConstraintError(GPPIError, ValueError):
    """Equality constraints are not triangular in the designated variables."""


class ConfigError(GPPIError, ValueError):
    """Malformed experiment configuration; ``field`` names the offending key path."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = ""
        if field is not None:
            where += f" [field {field}]"
        if line is not None:
            where += f" [line {line}]"
        super().__init__(message + where)
        self.field = field
        self.line = line


class CFLError(GPPIError, ValueError):
    """Explicit part of a finite-difference scheme violates its stability bound."""

    def __init__(self, message: str, suggested_dt: float):
        super().__init__(f"{message}; try dt <= {suggested_dt:.3e}")
        self.suggested_dt = suggested_dt
