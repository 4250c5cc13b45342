"""Algebraic continuation problems: ``g(x, β) = 0`` with x in R^n."""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from pointcycle.continuation.events import detect_hopf, hopf_frequency
from pointcycle.exceptions import StructuralError
from pointcycle.models import SystemDefinition, eval_jacobian, eval_rhs

logger = logging.getLogger(__name__)

Params = Mapping[str, float]
_PARAM_STEP = 1e-7
_STATE_STEP = 1e-7


@dataclass(frozen=True, slots=True, eq=False)
class AlgebraicPoint:
    x: np.ndarray
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "params", {k: float(v) for k, v in self.params.items()})


@dataclass(frozen=True, slots=True, eq=False)
class AlgebraicProblem:
    """``n + n_fp - 1`` equations in the state x and the free parameters.

    ``hopf_matrix`` returns the matrix whose eigenvalues decide Hopf points
    (the vector-field Jacobian for equilibrium branches).
    """

    name: str
    n: int
    func: Callable[[np.ndarray, Params], np.ndarray]
    free: tuple[str, ...]
    params: dict[str, float]
    jacobian: Callable[[np.ndarray, Params], np.ndarray] | None = None
    hopf_matrix: Callable[[np.ndarray, Params], np.ndarray] | None = None
    n_eq: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "free", tuple(self.free))
        object.__setattr__(self, "params", {k: float(v) for k, v in self.params.items()})
        missing = [p for p in self.free if p not in self.params]
        if missing:
            raise StructuralError(f"{self.name}: free parameters without a value: {missing}")
        n_eq = self.n if self.n_eq is None else self.n_eq
        if n_eq != self.n + len(self.free) - 1:
            raise StructuralError(
                f"{self.name}: {n_eq} equations in {self.n} states need "
                f"{n_eq - self.n + 1} free parameters, got {len(self.free)}"
            )
        object.__setattr__(self, "n_eq", n_eq)

    def with_free(self, names: Sequence[str]) -> AlgebraicProblem:
        return replace(self, free=tuple(names))

    def with_params(self, **updates: float) -> AlgebraicProblem:
        params = dict(self.params)
        params.update({k: float(v) for k, v in updates.items()})
        return replace(self, params=params)


class AlgebraicSystem:
    """Continuation adapter for an AlgebraicProblem; ``z = [x, β_free]``."""

    def __init__(self, problem: AlgebraicProblem) -> None:
        self.problem = problem
        self.free = problem.free
        self.n = problem.n
        self.size = problem.n + len(problem.free)

    def param_index(self, name: str) -> int:
        return self.n + self.free.index(name)

    def pack(self, point: AlgebraicPoint) -> np.ndarray:
        if point.x.size != self.n:
            raise StructuralError(f"{self.problem.name}: point has {point.x.size} states, expected {self.n}")
        free = [point.params.get(p, self.problem.params[p]) for p in self.free]
        return np.concatenate([point.x, np.asarray(free, dtype=float)])

    def params_of(self, z: np.ndarray, overrides: Params | None = None) -> dict[str, float]:
        params = dict(self.problem.params)
        if overrides:
            params.update(overrides)
        params.update(zip(self.free, (float(v) for v in z[self.n:])))
        return params

    def unpack(self, z: np.ndarray) -> AlgebraicPoint:
        return AlgebraicPoint(x=z[: self.n].copy(), params=self.params_of(z))

    def weights(self) -> np.ndarray:
        return np.ones(self.size)

    def norm(self, z: np.ndarray) -> float:
        return float(np.linalg.norm(z[: self.n]))

    def residual(self, z: np.ndarray, overrides: Params | None = None) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.problem.func(z[: self.n], self.params_of(z, overrides)), dtype=float))

    def jacobian(self, z: np.ndarray, overrides: Params | None = None) -> sparse.csc_matrix:
        x = z[: self.n]
        params = self.params_of(z, overrides)
        out = np.empty((self.problem.n_eq, self.size))
        if self.problem.jacobian is not None:
            out[:, : self.n] = np.asarray(self.problem.jacobian(x, params), dtype=float)
        else:
            for k in range(self.n):
                step = _STATE_STEP * (1.0 + abs(x[k]))
                up, down = x.copy(), x.copy()
                up[k] += step
                down[k] -= step
                out[:, k] = (self.problem.func(up, params) - self.problem.func(down, params)) / (2.0 * step)
        base = np.asarray(self.problem.func(x, params), dtype=float)
        for p, name in enumerate(self.free):
            step = _PARAM_STEP * (1.0 + abs(params[name]))
            shifted = dict(params)
            shifted[name] += step
            out[:, self.n + p] = (np.asarray(self.problem.func(x, shifted)) - base) / step
        return sparse.csc_matrix(out)

    def refresh(self, z: np.ndarray) -> AlgebraicSystem:
        return self

    def hopf_test(self, z: np.ndarray) -> float:
        if self.problem.hopf_matrix is None:
            raise StructuralError(f"{self.problem.name}: no matrix for Hopf detection")
        return detect_hopf(self.problem.hopf_matrix(z[: self.n], self.params_of(z)))

    def hopf_data(self, z: np.ndarray) -> tuple[float, np.ndarray] | None:
        if self.problem.hopf_matrix is None:
            return None
        return hopf_frequency(self.problem.hopf_matrix(z[: self.n], self.params_of(z)))


def equilibrium_problem(
    system: SystemDefinition, params: Params | None, free: str | Sequence[str]
) -> AlgebraicProblem:
    """``f(x, α) = 0`` continued in one system parameter, with Hopf detection."""
    free = (free,) if isinstance(free, str) else tuple(free)
    for name in free:
        system.param_index(name)
    values = system.defaults()
    values.update({k: float(v) for k, v in (params or {}).items() if system.has_param(k)})

    def func(x: np.ndarray, p: Params) -> np.ndarray:
        return eval_rhs(system, x, system.param_vector(p))

    def jac(x: np.ndarray, p: Params) -> np.ndarray:
        return eval_jacobian(system, x, system.param_vector(p))

    return AlgebraicProblem(
        name=f"{system.name}-equilibrium",
        n=system.dimension,
        func=func,
        free=free,
        params=values,
        jacobian=jac,
        hopf_matrix=jac,
    )
