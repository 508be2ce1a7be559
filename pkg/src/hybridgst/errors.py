"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`GSTError`
and carries a short machine-readable ``code`` plus a ``details`` mapping, so
callers (and the CLI) can branch on the failure without parsing messages.
"""

from __future__ import annotations

from typing import Any


class GSTError(Exception):
    code = "error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def as_dict(self) -> dict[str, Any]:
        return {"code": self.code, "message": self.message, **self.details}


class ValidationError(GSTError, ValueError):
    """Inputs violate a documented precondition."""

    code = "validation"


class NumericalError(GSTError, ArithmeticError):
    """A numerical procedure failed (no bracket, non-convergence, ...)."""

    code = "numerical"


class NotPositiveSemidefinite(ValidationError):
    code = "not_psd"


class DimensionMismatch(ValidationError):
    code = "dimension_mismatch"


class RankDeficientDesign(ValidationError):
    code = "rank_deficient"


class BracketError(NumericalError):
    code = "no_bracket"
