"""Error hierarchy shared by the solver, continuation and pipeline layers."""

from __future__ import annotations


class PointCycleError(RuntimeError):
    """Base class for every error raised by pointcycle."""


class ConfigurationError(PointCycleError, ValueError):
    """Bad user input: unknown names, wrong parameter counts, invalid settings."""


class PrerequisiteMissing(ConfigurationError):
    """A pipeline stage was started before the outputs it reads exist."""


class StructuralError(PointCycleError, ValueError):
    """A problem or solution is inconsistent with itself (counts, dimensions, meshes)."""


class DomainError(PointCycleError, ValueError):
    """An argument lies outside the domain of the operation."""


class NewtonDiverged(PointCycleError):
    """Newton's method failed to bring the residual below tolerance."""

    def __init__(self, message: str, *, iterations: int = 0, residual: float = float("nan")) -> None:
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class SingularJacobian(NewtonDiverged):
    """The linearized system could not be factorized."""


class WrongStability(PointCycleError):
    """Computed stability does not match what was requested: equilibrium eigendata or a saddle cycle."""


class DegenerateEigenvector(PointCycleError):
    """An eigenvector cannot be split into tangent directions."""


class NoBranchPoint(PointCycleError):
    """No usable branch point was found or its second null direction is degenerate."""


class DegenerateFold(PointCycleError):
    """A fold cannot be continued because its null vector is degenerate."""


class OrthogonalityViolation(PointCycleError):
    """An adjoint eigenfunction is not orthogonal to the cycle's tangent directions."""


class OracleError(PointCycleError):
    """The time-integration oracle failed."""


class StageFailed(PointCycleError):
    """A pipeline stage aborted; the original error is chained as ``__cause__``."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
