"""Boundary-value problems on [0, 1] with integral constraints and free parameters."""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from pointcycle.bvp.mesh import MeshedSolution
from pointcycle.exceptions import StructuralError

logger = logging.getLogger(__name__)

Params = Mapping[str, float]
RhsFunction = Callable[[np.ndarray, Params], np.ndarray]
JacobianFunction = Callable[[np.ndarray, Params], np.ndarray]
BoundaryFunction = Callable[[np.ndarray, np.ndarray, Params], np.ndarray]
Integrand = Callable[[np.ndarray, Params, np.ndarray | None, np.ndarray | None], np.ndarray]


@dataclass(frozen=True, slots=True, eq=False)
class IntegralConstraint:
    """``∫_0^1 integrand(U(τ), β, ref(τ), ref'(τ)) dτ = 0``.

    ``integrand`` and ``gradient`` are evaluated on stacks of states and
    return shapes (k,) and (k, n_d). Without ``gradient`` the state
    derivative is taken by finite differences.

    ``track`` names the component range ``(start, stop)`` of an accepted
    solution that replaces ``reference`` on refresh.
    """

    name: str
    integrand: Integrand
    gradient: Integrand | None = None
    reference: MeshedSolution | None = None
    track: tuple[int, int] | None = None

    def reference_at(self, tau: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        if self.reference is None:
            return None, None
        return self.reference(tau), self.reference.derivative(tau)

    def refreshed(self, solution: MeshedSolution) -> IntegralConstraint:
        if self.track is None:
            return self
        return replace(self, reference=solution.component(*self.track))


@dataclass(frozen=True, slots=True, eq=False)
class BVProblem:
    """``U' = F(U, β)``, ``b(U(0), U(1), β) = 0`` and ``n_ic`` integral constraints.

    ``params`` holds a value for every parameter the problem reads; the
    names in ``free`` are unknowns, the rest stay fixed. Construction fails
    unless ``n_fp = n_bc + n_ic - n_d + 1``.
    """

    name: str
    n_d: int
    rhs: RhsFunction
    jacobian: JacobianFunction
    bc: BoundaryFunction
    n_bc: int
    free: tuple[str, ...]
    params: dict[str, float]
    integrals: tuple[IntegralConstraint, ...] = ()
    labels: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "free", tuple(self.free))
        object.__setattr__(self, "integrals", tuple(self.integrals))
        object.__setattr__(self, "params", {k: float(v) for k, v in self.params.items()})
        if len(set(self.free)) != len(self.free):
            raise StructuralError(f"{self.name}: duplicate free parameters {self.free}")
        missing = [p for p in self.free if p not in self.params]
        if missing:
            raise StructuralError(f"{self.name}: free parameters without a value: {missing}")
        expected = self.n_bc + self.n_ic - self.n_d + 1
        if self.n_fp != expected:
            raise StructuralError(
                f"{self.name}: counting rule violated, n_bc={self.n_bc} n_ic={self.n_ic} "
                f"n_d={self.n_d} needs {expected} free parameters, got {self.n_fp} {self.free}"
            )

    @property
    def n_ic(self) -> int:
        return len(self.integrals)

    @property
    def n_fp(self) -> int:
        return len(self.free)

    @property
    def fixed_params(self) -> dict[str, float]:
        return {k: v for k, v in self.params.items() if k not in self.free}

    def with_free(self, names: Sequence[str]) -> BVProblem:
        return replace(self, free=tuple(names))

    def with_params(self, values: Params | None = None, **updates: float) -> BVProblem:
        params = dict(self.params)
        for source in (values or {}, updates):
            params.update({k: float(v) for k, v in source.items() if k in params})
        return replace(self, params=params)

    def refresh(self, solution: MeshedSolution) -> BVProblem:
        """Copy with integral references replaced by the accepted *solution*."""
        if not any(c.track is not None for c in self.integrals):
            return self
        return replace(self, integrals=tuple(c.refreshed(solution) for c in self.integrals))
