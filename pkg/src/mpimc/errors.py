"""Exception hierarchy shared by the simulator, solvers and harness."""


class MpimcError(Exception):
    """Base class for all package errors."""


class DomainError(MpimcError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ScalingError(MpimcError, ValueError):
    """A matrix cannot be mapped onto conductances (nothing to encode)."""


class CalibrationError(MpimcError, RuntimeError):
    """Drift calibration read a non-positive summed conductance."""


class BreakdownError(MpimcError, ArithmeticError):
    """A Krylov recurrence hit a zero denominator."""


class DivergenceError(MpimcError, ArithmeticError):
    """Iterative refinement produced non-finite iterates."""

    def __init__(self, message: str, refinement: int):
        super().__init__(message)
        self.refinement = refinement


class ConvergenceError(MpimcError, RuntimeError):
    """One or more solves did not reach the requested tolerance."""

    def __init__(self, message: str, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class ConfigError(MpimcError, ValueError):
    """An experiment configuration failed validation."""
