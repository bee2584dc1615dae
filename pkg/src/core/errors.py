"""
Error types shared by the model, simulator, fitter and command line.

Every error carries the process exit code the CLI maps it to.
"""

from typing import Optional

from src.core.constants import (
    EXIT_ERROR,
    EXIT_FIT,
    EXIT_INCONSISTENT,
    EXIT_NUMERIC,
    EXIT_PARSE,
    EXIT_VALIDATION,
)


class OpoPairsError(Exception):
    """Base class for every failure raised by this package"""

    exit_code = EXIT_ERROR
    hint: Optional[str] = None

    def __init__(self, message: str, hint: Optional[str] = None):
        super().__init__(message)
        if hint is not None:
            self.hint = hint


class InvalidParamsError(OpoPairsError, ValueError):
    """Parameters violate a documented invariant"""

    exit_code = EXIT_VALIDATION

    def __init__(self, message: str, field: Optional[str] = None, hint: Optional[str] = None):
        super().__init__(message, hint)
        self.field = field


class InconsistentInputsError(OpoPairsError):
    """Inputs are individually valid but contradict each other (e.g. negative loss)"""

    exit_code = EXIT_INCONSISTENT


class ParseError(OpoPairsError):
    """A config, histogram or event file could not be parsed

    Parameters
    ----------
    message : str
        What went wrong.
    line : int, optional
        1-based line number in the offending file.
    field : str, optional
        Key or column involved.
    """

    exit_code = EXIT_PARSE

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None,
                 hint: Optional[str] = None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field '{field}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message, hint)
        self.line = line
        self.field = field


class QuadratureError(OpoPairsError):
    """Adaptive quadrature did not reach the requested tolerance"""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, achieved_error: float):
        super().__init__(f"{message} (achieved error {achieved_error:.3e})")
        self.achieved_error = achieved_error


class TabulationError(OpoPairsError):
    """An inverse-CDF table failed its monotonicity self-check"""

    exit_code = EXIT_NUMERIC


class FitError(OpoPairsError):
    exit_code = EXIT_FIT


class TooFewPeaksError(FitError):
    hint = "check T_R < tau_F and that the window holds at least three comb peaks"


class SingularMatrixError(FitError):
    hint = "freeze unidentifiable parameters (e.g. c2 when the window has no floor region)"


class InvalidGeometryError(InvalidParamsError):
    """Cavity segments do not fit inside the round-trip path"""
