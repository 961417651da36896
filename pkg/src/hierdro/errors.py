"""Exception types shared across the package.

The CLI maps these onto exit codes: validation-style errors exit 1,
verification failures exit 2, and runtime divergence exits 3.
"""


class HierdroError(Exception):
    """Base class for all package errors."""


class ParameterError(HierdroError, ValueError):
    """An argument is outside its documented domain."""


class InvalidDatasetError(HierdroError, ValueError):
    """A dataset violates a structural requirement (empty group, bad shape)."""


class CsvParseError(HierdroError, ValueError):
    """A CSV file is malformed; the message names the offending line."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class CsvSchemaError(HierdroError, ValueError):
    """A CSV file parses but its contents contradict the dataset schema."""


class UnsupportedInstanceError(HierdroError, ValueError):
    """An exact oracle was asked for an instance outside its small-scale domain."""


class DivergenceError(HierdroError, RuntimeError):
    """Training produced non-finite values; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class TuningInfeasibleError(HierdroError, ValueError):
    """A group is too small for quantile-based radius tuning."""


class UnsupportedDiagnosticError(HierdroError, ValueError):
    """A convexity-dependent diagnostic was requested for a non-convex setup."""


class ConfigError(HierdroError, ValueError):
    """An experiment configuration failed schema validation."""
