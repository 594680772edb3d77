"""Exceptions raised by the dgmp services.

Validation-type errors subclass ``ValueError`` so that front ends can map the whole
family to one response, the same way the routes map service ``ValueError``s.
"""

from typing import Any


class DGMPError(Exception):
    """Base class for errors raised by the library."""


class ManifoldError(DGMPError, ValueError):
    """A value does not belong to the manifold it is used with."""


class InvalidTrajectoryError(DGMPError, ValueError):
    """A trajectory does not satisfy its system's dynamics."""


class InfeasibleControlError(DGMPError, ValueError):
    """A control lies outside its control set."""


class ConstraintViolationError(DGMPError, ValueError):
    """A feasibility or multiplier-sign precondition does not hold."""


class ProblemFileError(DGMPError, ValueError):
    """A problem definition is inconsistent with its manifolds or registries."""


class NewtonDivergence(DGMPError):
    """The implicit variational step could not be solved."""

    def __init__(
        self,
        message: str,
        step: int | None = None,
        residual: float | None = None,
    ) -> None:
        super().__init__(message)
        self.step = step
        self.residual = residual

    def at_step(self, step: int) -> "NewtonDivergence":
        """Return a copy of this error tagged with the failing integration step."""
        return NewtonDivergence(
            f"step {step}: {self.args[0]}",
            step=step,
            residual=self.residual,
        )


class NoCertificate(DGMPError):
    """Neither multiplier branch reached the residual tolerance."""

    def __init__(self, message: str, best_attempt: Any = None) -> None:
        super().__init__(message)
        self.best_attempt = best_attempt


class OracleError(DGMPError, ArithmeticError):
    """A reference computation produced non-finite or singular data."""
