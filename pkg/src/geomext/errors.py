"""Exception and warning classes shared across the toolkit."""

from __future__ import annotations

from typing import Any


class GeomExtError(Exception):
    """Base class for all toolkit errors."""


class DomainError(GeomExtError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ParseError(GeomExtError, ValueError):
    """A data file could not be parsed (bad or missing cell)."""


class StructuralError(GeomExtError, ValueError):
    """A data file parsed but violates a structural invariant."""


class NumericalError(GeomExtError, ArithmeticError):
    """A computation produced non-finite values or failed to factorise."""


class FitError(GeomExtError, RuntimeError):
    """An optimiser failed. ``best`` carries the last or best iterate."""

    def __init__(self, message: str, best: Any = None, diagnostics: Any = None):
        super().__init__(message)
        self.best = best
        self.diagnostics = diagnostics


class DegeneracyError(FitError):
    """A fitted object collapsed (e.g. two sites mapped onto each other)."""


class SamplingError(GeomExtError, RuntimeError):
    """A sampler has no valid mass to draw from."""


class DependencyError(GeomExtError, RuntimeError):
    """A pipeline stage was invoked before the stage it depends on."""

    def __init__(self, stage: str, required: str):
        super().__init__(f"stage '{stage}' requires the '{required}' artifact; run '{required}' first")
        self.stage = stage
        self.required = required


class DegenerateWarning(UserWarning):
    """Input was degenerate; the result is defined but uninformative."""


class ExtrapolationWarning(UserWarning):
    """A value had to be extrapolated beyond the observed data."""


class UnderflowWarning(RuntimeWarning):
    """A probability underflowed to zero."""
