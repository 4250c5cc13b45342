"""The interface continuation needs from a discretized problem."""

from __future__ import annotations

from collections.abc import Mapping
from typing import Any, Protocol, runtime_checkable

import numpy as np
from scipy import sparse

from pointcycle.bvp.collocation import CollocationSystem
from pointcycle.bvp.mesh import MeshedSolution
from pointcycle.bvp.problem import BVProblem
from pointcycle.continuation.algebraic import AlgebraicPoint, AlgebraicProblem, AlgebraicSystem
from pointcycle.exceptions import StructuralError


@runtime_checkable
class Discretization(Protocol):
    """``size - 1`` equations in ``size`` unknowns ``z``.

    Implementations may also provide ``hopf_test``/``hopf_data`` (Hopf
    detection) and ``adapt`` (mesh adaptation).
    """

    free: tuple[str, ...]
    size: int

    def param_index(self, name: str) -> int: ...

    def pack(self, point: Any) -> np.ndarray: ...

    def unpack(self, z: np.ndarray) -> Any: ...

    def residual(self, z: np.ndarray, overrides: Mapping[str, float] | None = None) -> np.ndarray: ...

    def jacobian(self, z: np.ndarray, overrides: Mapping[str, float] | None = None) -> sparse.spmatrix: ...

    def weights(self) -> np.ndarray: ...

    def norm(self, z: np.ndarray) -> float: ...

    def refresh(self, z: np.ndarray) -> Discretization: ...


def discretize(problem: Any, start: Any) -> tuple[Discretization, np.ndarray]:
    """Discretization for *problem* and the packed *start* point."""
    if isinstance(problem, BVProblem):
        if not isinstance(start, MeshedSolution):
            raise StructuralError(f"{problem.name}: a boundary-value problem starts from a MeshedSolution")
        system = CollocationSystem(problem, start.mesh, start.degree)
        return system, system.pack(start)
    if isinstance(problem, AlgebraicProblem):
        if not isinstance(start, AlgebraicPoint):
            start = AlgebraicPoint(x=np.asarray(start, dtype=float), params=problem.params)
        system = AlgebraicSystem(problem)
        return system, system.pack(start)
    if isinstance(problem, Discretization):
        z = np.asarray(start, dtype=float) if isinstance(start, np.ndarray) else problem.pack(start)
        if z.size != problem.size:
            raise StructuralError(f"start vector has {z.size} entries, discretization {problem.size}")
        return problem, z
    raise StructuralError(f"cannot continue an object of type {type(problem).__name__}")
