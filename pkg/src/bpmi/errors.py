"""Exception hierarchy shared by every module in the package."""


class BpmiError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(BpmiError, ValueError):
    """An argument violates a documented precondition."""


class NumericalFailureError(BpmiError, ArithmeticError):
    """A factorization failed even after maximum stabilization."""

    def __init__(self, message: str, min_eigenvalue: float | None = None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class TrainingFailureError(BpmiError, RuntimeError):
    """Every training restart produced a non-finite loss."""


class ConfigurationError(BpmiError, ValueError):
    """An experiment or CLI configuration is inconsistent or incomplete."""


class UnsupportedOperationError(BpmiError, NotImplementedError):
    """The requested operation does not apply to this object."""


class ParseError(BpmiError, ValueError):
    """A file on disk could not be parsed."""


class ValidationError(BpmiError, ValueError):
    """A parsed file is well-formed but inconsistent with what was expected."""

    def __init__(self, message: str, ids: list[str] | None = None):
        super().__init__(message)
        self.ids = list(ids or [])
