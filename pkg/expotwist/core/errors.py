"""Exception hierarchy shared by every service module."""

from typing import Any, Optional, Sequence


class ExpoTwistError(Exception):
    """Base class for all domain errors raised by the package."""


class NumericalFailureError(ExpoTwistError):
    """A finite-difference or gradient evaluation produced a non-finite value."""

    def __init__(self, message: str, stencil: Optional[dict] = None):
        super().__init__(message)
        self.stencil = stencil or {}

    def __str__(self):
        base = super().__str__()
        if not self.stencil:
            return base
        return f"{base} (stencil: {self.stencil})"


class EstimationError(ExpoTwistError):
    """Monte Carlo estimation at a point failed (e.g. every sub-path diverged)."""

    def __init__(self, message: str, t: Optional[float] = None, x: Any = None):
        super().__init__(message)
        self.t = t
        self.x = x


class DegenerateEnsembleError(ExpoTwistError):
    """Weights of an ensemble cannot be normalized."""


class InvariantViolationError(ExpoTwistError):
    """A model or value-source invariant was observed to be broken."""


class DegenerateTwistError(ExpoTwistError):
    """Rejection sampling of the twisted initial law accepts (almost) nothing."""


class UnsupportedModelError(ExpoTwistError):
    """The requested operation is not defined for this model."""


class InternalConsistencyError(ExpoTwistError):
    """An algebraic identity that must hold exactly did not."""


class NonConvergenceError(ExpoTwistError):
    """An iterative solver hit its iteration cap; the trace is attached."""

    def __init__(self, message: str, trace: Sequence = ()):
        super().__init__(message)
        self.trace = list(trace)


class ConfigError(ExpoTwistError):
    """A run configuration could not be parsed or validated."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.key = key
        self.line = line

    def __str__(self):
        base = super().__str__()
        if self.line is not None:
            return f"line {self.line}: {base}"
        return base


class RunLockedError(ExpoTwistError):
    """Another process holds the lock on the run directory."""
