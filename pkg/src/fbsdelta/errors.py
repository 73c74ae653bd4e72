"""Exception hierarchy shared by every module.

Each exception carries a short machine-readable ``code`` (the class name) and
an optional ``witness`` payload that the CLI serializes into its error JSON.
"""

from __future__ import annotations

from typing import Any


class FBSDeltaError(Exception):
    """Base class for all errors raised by the package."""

    def __init__(self, message: str, witness: Any = None):
        super().__init__(message)
        self.message = message
        self.witness = witness

    @property
    def code(self) -> str:
        return type(self).__name__


class MomentViolation(FBSDeltaError):
    pass


class BadProbability(FBSDeltaError):
    pass


class LevelMismatch(FBSDeltaError):
    pass


class ShapeMismatch(FBSDeltaError):
    pass


class ControlOutsideSet(FBSDeltaError):
    pass


class NonConvergence(FBSDeltaError):
    def __init__(self, message: str, best_residual: float, witness: Any = None):
        super().__init__(message, witness)
        self.best_residual = best_residual


class SingularSystem(FBSDeltaError):
    def __init__(self, message: str, rank_defect: int | None = None, witness: Any = None):
        super().__init__(message, witness)
        self.rank_defect = rank_defect


class SingularJacobian(SingularSystem):
    pass


class UncertifiedSolution(FBSDeltaError):
    pass


class InvariantViolation(FBSDeltaError):
    pass


class SingularC4(InvariantViolation):
    pass


class DivisionByZeroConstant(FBSDeltaError):
    """An inequality divides by a zero constant and is vacuous; callers record it as a notice."""


class ConfigError(FBSDeltaError):
    def __init__(self, message: str, path: str = "", witness: Any = None):
        super().__init__(f"{path}: {message}" if path else message, witness)
        self.path = path
