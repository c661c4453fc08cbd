"""Exception hierarchy shared by every module.

Each error family maps onto one CLI exit code (see ``modeforge.cli``).
"""


class ModeforgeError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigurationError(ModeforgeError, ValueError):
    """Rejected configuration: bad key, bad value, violated invariant."""

    exit_code = 2


class SolverError(ModeforgeError, RuntimeError):
    """Linear or eigen solve failed or did not reach its residual target."""

    exit_code = 3

    def __init__(self, message, residual=None, context=None):
        super().__init__(message)
        self.residual = residual
        self.context = dict(context or {})

    def __str__(self):
        msg = super().__str__()
        if self.context:
            ctx = ", ".join(f"{k}={v}" for k, v in self.context.items())
            msg = f"{msg} ({ctx})"
        if self.residual is not None:
            msg = f"{msg} [residual={self.residual:.3e}]"
        return msg


class NoGuidedModeError(ModeforgeError):
    """The index profile supports no guided mode at this wavelength."""

    exit_code = 3


class FitError(ModeforgeError, RuntimeError):
    """Coincidence-dip fit did not converge."""

    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ParseError(ModeforgeError, ValueError):
    """Malformed input file; carries the offending line number when known."""

    exit_code = 5

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class PreconditionError(ModeforgeError, ValueError):
    """An operation was called on input that violates its precondition."""

    exit_code = 2


class OptimizationDiverged(ModeforgeError, RuntimeError):
    """Objective grew by more than the divergence factor; carries the trace."""

    exit_code = 3

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class UndefinedQuantityError(ModeforgeError, ValueError):
    """A derived quantity (splitting ratio, visibility) has a zero denominator."""

    exit_code = 2
