"""Exceptions raised by the photophysics toolkit.

Every exception carries the process exit status the CLI uses for it.
"""

from typing import Optional


class SivError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class InputError(SivError):
    """Inputs violate a documented precondition."""

    exit_code = 2


class ConvergenceError(SivError):
    """A numerical procedure failed to converge."""

    exit_code = 3


class StorageError(SivError):
    """Reading or writing a data file failed."""

    exit_code = 4


class InvalidParameters(InputError):
    """A parameter set violates its type invariants."""


class ComplexEigenvalue(InputError):
    """A² < 4B: the rate matrix has no real, distinct relaxation times."""


class InvalidLimits(InputError):
    """Limiting values that do not yield positive rate coefficients."""


class UnknownCalibration(InputError):
    """No power-to-photon-flux calibration exists for the wavelength."""


class EmptyChannel(InputError):
    """A detector channel holds no events."""


class DegenerateTrace(InputError):
    """A time trace with no window above the absolute floor."""


class OutOfRange(InputError):
    """A derived probability lies outside [0, 1]."""


class NoConvergence(ConvergenceError):
    """The least-squares solver stopped before meeting its tolerances."""

    def __init__(self, message: str, iterations: Optional[int] = None) -> None:
        super().__init__(message)
        self.iterations = iterations


class StageDivergence(ConvergenceError):
    """One stage of the staged power-dependence fit failed."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class QuadratureFailure(ConvergenceError):
    """Adaptive quadrature did not reach the requested tolerance."""


class FileFormatError(StorageError):
    """A data file is malformed or lacks required columns."""


class TimestampFormatError(FileFormatError):
    """A timestamp file is malformed or of an unknown version."""
