"""Exception types shared across the solver stack."""

from __future__ import annotations


class MFGError(Exception):
    """Base class for all package errors."""


class DomainError(MFGError, ValueError):
    """An argument lies outside the domain of a model (for example m <= 0)."""


class UnsupportedDerivative(MFGError, KeyError):
    """The requested partial derivative is not provided by the model."""


class NoRoot(MFGError):
    """The monotone inverse m = H^-1(p, s) has no positive root."""

    def __init__(self, message: str, location: tuple | None = None):
        super().__init__(message)
        self.location = location


class OutOfRange(MFGError, ValueError):
    """z lies outside the range of the terminal cost g."""


class ClampOverflow(MFGError):
    """Too many nodes needed density clamping during assembly."""

    def __init__(self, message: str, fraction: float):
        super().__init__(message)
        self.fraction = fraction


class SingularMatrix(MFGError):
    """A pivot of the banded factorization underflowed."""


class NoConvergence(MFGError):
    """Newton or a continuation loop failed; carries whatever was obtained."""

    def __init__(self, message: str, best=None, reports=None, trace=None, detail=None):
        super().__init__(message)
        self.best = best
        self.reports = list(reports or [])
        self.trace = trace
        self.detail = detail or {}


class AssumptionFailure(MFGError):
    """The model violates a standing structural assumption on the sample box."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class InsufficientData(MFGError):
    """Too few samples for a fit."""


class PreconditionFailure(MFGError):
    """A diagnostic was requested on input it does not apply to."""


class GridMismatch(MFGError):
    """Solutions being compared live on incompatible grids."""


class ConfigError(MFGError):
    """Invalid run configuration; the message names the offending key."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        prefix = ""
        if key is not None:
            prefix += f"[{key}] "
        if line is not None:
            prefix += f"(line {line}) "
        super().__init__(prefix + message)
        self.key = key
        self.line = line
