"""Three-dimensional vector fields with named parameters and analytic Jacobians.

Every built-in system is written as a pair of plain functions, ``_rhs`` and
``_jac``, taking the three state components followed by the parameters in
declaration order. Components may be scalars or equally shaped arrays, so the
same code evaluates one state or every Gauss point of a mesh at once.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from pointcycle.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

RhsFunction = Callable[..., tuple]
JacFunction = Callable[..., tuple]


@dataclass(frozen=True, slots=True, eq=False)
class SystemDefinition:
    """An autonomous ODE ``du/dt = f(u, alpha)`` in three dimensions."""

    name: str
    param_names: tuple[str, ...]
    param_defaults: tuple[float, ...]
    rhs: RhsFunction
    jacobian: JacFunction
    # Parameters a continuation run may free
    bifurcation_params: tuple[str, ...] = ()
    dimension: int = 3
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.param_names) != len(self.param_defaults):
            raise ConfigurationError(
                f"{self.name}: {len(self.param_names)} parameter names but "
                f"{len(self.param_defaults)} defaults"
            )
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.param_names)})

    def param_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ConfigurationError(
                f"system '{self.name}' has no parameter '{name}' "
                f"(known: {', '.join(self.param_names)})"
            ) from None

    def has_param(self, name: str) -> bool:
        return name in self._index

    def defaults(self) -> dict[str, float]:
        return dict(zip(self.param_names, self.param_defaults))

    def param_vector(self, values: Mapping[str, float] | None = None) -> np.ndarray:
        """Positional parameter vector; names missing from *values* take defaults.

        Names in *values* that are not system parameters are ignored, so the
        full parameter dictionary of a composite solution can be passed as is.
        """
        vec = np.array(self.param_defaults, dtype=float)
        if values:
            for name, value in values.items():
                idx = self._index.get(name)
                if idx is not None:
                    vec[idx] = float(value)
        return vec

    def with_params(self, **overrides: float) -> np.ndarray:
        for name in overrides:
            self.param_index(name)
        return self.param_vector(overrides)

    def divergence(self, u: np.ndarray, alpha: Sequence[float] | np.ndarray) -> np.ndarray:
        """Trace of the Jacobian at *u*."""
        return np.trace(eval_jacobian(self, u, alpha), axis1=-2, axis2=-1)


def _check_params(system: SystemDefinition, alpha: Sequence[float] | np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (len(system.param_names),):
        raise ConfigurationError(
            f"system '{system.name}' expects {len(system.param_names)} parameters "
            f"({', '.join(system.param_names)}), got shape {alpha.shape}"
        )
    return alpha


def eval_rhs(
    system: SystemDefinition, u: np.ndarray, alpha: Sequence[float] | np.ndarray
) -> np.ndarray:
    """f(u, alpha) for a state of shape (3,) or a stack of shape (k, 3)."""
    alpha = _check_params(system, alpha)
    u = np.asarray(u, dtype=float)
    rows = system.rhs(u[..., 0], u[..., 1], u[..., 2], *alpha)
    return np.stack(np.broadcast_arrays(*rows), axis=-1)


def eval_jacobian(
    system: SystemDefinition, u: np.ndarray, alpha: Sequence[float] | np.ndarray
) -> np.ndarray:
    """Analytic df/du, shape (3, 3) or (k, 3, 3)."""
    alpha = _check_params(system, alpha)
    u = np.asarray(u, dtype=float)
    shape = u.shape[:-1]
    rows = system.jacobian(u[..., 0], u[..., 1], u[..., 2], *alpha)
    jac = np.empty(shape + (3, 3))
    for i, row in enumerate(rows):
        for j, entry in enumerate(row):
            jac[..., i, j] = entry
    return jac


def jacobian_derivative(
    system: SystemDefinition,
    u: np.ndarray,
    alpha: Sequence[float] | np.ndarray,
    step: float = 1e-6,
) -> np.ndarray:
    """Central differences of the analytic Jacobian; entry [..., i, j, k] is dJ_ij/du_k."""
    u = np.asarray(u, dtype=float)
    out = np.empty(u.shape[:-1] + (3, 3, 3))
    for k in range(3):
        h = step * (1.0 + np.abs(u[..., k]))
        up = u.copy()
        down = u.copy()
        up[..., k] += h
        down[..., k] -= h
        scale = np.asarray(2.0 * h)[..., None, None]
        out[..., k] = (eval_jacobian(system, up, alpha) - eval_jacobian(system, down, alpha)) / scale
    return out


# ------------------------------------------------------------------
# Built-in systems
# ------------------------------------------------------------------

def _lorenz_rhs(x1, x2, x3, sigma, r, b):
    return (
        sigma * (x2 - x1),
        r * x1 - x2 - x1 * x3,
        x1 * x2 - b * x3,
    )


def _lorenz_jac(x1, x2, x3, sigma, r, b):
    row1 = [-sigma, sigma, 0.0]
    row2 = [r - x3, -1.0, -x1]
    row3 = [x2, x1, -b]
    return row1, row2, row3


def _circuit_rhs(x1, x2, x3, nu, beta, gamma, r, a3, b3):
    d = x2 - x1
    return (
        (-(beta + nu) * x1 + beta * x2 - a3 * x1**3 + b3 * d**3) / r,
        beta * x1 - (beta + gamma) * x2 - x3 - b3 * d**3,
        x2,
    )


def _circuit_jac(x1, x2, x3, nu, beta, gamma, r, a3, b3):
    c = 3.0 * b3 * (x2 - x1) ** 2
    row1 = [(-(beta + nu) - 3.0 * a3 * x1**2 - c) / r, (beta + c) / r, 0.0]
    row2 = [beta + c, -(beta + gamma) - c, -1.0]
    row3 = [0.0, 1.0, 0.0]
    return row1, row2, row3


def _food_chain_rhs(x1, x2, x3, a1, a2, b1, b2, d1, d2):
    f1 = a1 * x1 * x2 / (1.0 + b1 * x1)
    f2 = a2 * x2 * x3 / (1.0 + b2 * x2)
    return (
        x1 * (1.0 - x1) - f1,
        f1 - f2 - d1 * x2,
        f2 - d2 * x3,
    )


def _food_chain_jac(x1, x2, x3, a1, a2, b1, b2, d1, d2):
    q1 = 1.0 + b1 * x1
    q2 = 1.0 + b2 * x2
    f1_x1 = a1 * x2 / q1**2
    f1_x2 = a1 * x1 / q1
    f2_x2 = a2 * x3 / q2**2
    f2_x3 = a2 * x2 / q2
    row1 = [1.0 - 2.0 * x1 - f1_x1, -f1_x2, 0.0]
    row2 = [f1_x1, f1_x2 - f2_x2 - d1, -f2_x3]
    row3 = [0.0, f2_x2, f2_x3 - d2]
    return row1, row2, row3


_BUILTINS: dict[str, SystemDefinition] = {
    "lorenz": SystemDefinition(
        name="lorenz",
        param_names=("sigma", "r", "b"),
        param_defaults=(10.0, 21.0, 8.0 / 3.0),
        rhs=_lorenz_rhs,
        jacobian=_lorenz_jac,
        bifurcation_params=("r", "sigma", "b"),
    ),
    # r is the fixed time constant of the first equation, never continued
    "circuit": SystemDefinition(
        name="circuit",
        param_names=("nu", "beta", "gamma", "r", "a3", "b3"),
        param_defaults=(-1.5, -0.32, 0.0, 0.6, 0.328578, 0.933578),
        rhs=_circuit_rhs,
        jacobian=_circuit_jac,
        bifurcation_params=("nu", "beta"),
    ),
    "food_chain": SystemDefinition(
        name="food_chain",
        param_names=("a1", "a2", "b1", "b2", "d1", "d2"),
        param_defaults=(5.0, 0.1, 3.0, 2.0, 0.25, 0.0125),
        rhs=_food_chain_rhs,
        jacobian=_food_chain_jac,
        bifurcation_params=("d1", "d2"),
    ),
}


def available_systems() -> tuple[str, ...]:
    return tuple(_BUILTINS)


def builtin(name: str) -> SystemDefinition:
    """Return a built-in system by name."""
    try:
        return _BUILTINS[name]
    except KeyError:
        raise ConfigurationError(
            f"Unknown system: '{name}'. Use one of: {', '.join(_BUILTINS)}."
        ) from None
