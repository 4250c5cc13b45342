"""Starting limit cycles at Hopf points of equilibrium branches."""

from __future__ import annotations

import logging
import math

import numpy as np

from pointcycle.bvp.collocation import DEFAULT_MAX_ITER, DEFAULT_TOL, CollocationSystem, bordered_newton
from pointcycle.bvp.mesh import MeshedSolution, uniform_mesh
from pointcycle.bvp.problem import BVProblem
from pointcycle.continuation.branch import weighted_norm
from pointcycle.continuation.events import HOPF, BranchEvent
from pointcycle.exceptions import DomainError
from pointcycle.floquet import PERIOD, build_cycle_problem
from pointcycle.models import SystemDefinition

logger = logging.getLogger(__name__)


def _hopf_data(event: BranchEvent) -> tuple[np.ndarray, dict[str, float], float, np.ndarray, str]:
    if event.kind != HOPF:
        raise DomainError(f"event {event.label} is a {event.kind}, not a Hopf point")
    point = event.payload
    free = event.data["discretization"].free[0]
    return point.x, dict(point.params), event.data["omega"], event.data["eigenvector"], free


def hopf_cycle_guess(
    event: BranchEvent, amplitude: float, mesh: np.ndarray, degree: int
) -> MeshedSolution:
    """``ξ + a(Re v cos 2πτ - Im v sin 2πτ)`` with ``T+ = 2π/ω``."""
    xi, params, omega, vec, _ = _hopf_data(event)
    vec = np.asarray(vec, dtype=complex)
    vec = vec / np.linalg.norm(vec)

    def orbit(tau: np.ndarray) -> np.ndarray:
        angle = 2.0 * math.pi * tau[:, None]
        return xi + amplitude * (vec.real * np.cos(angle) - vec.imag * np.sin(angle))

    params[PERIOD] = 2.0 * math.pi / omega
    return MeshedSolution.from_function(orbit, mesh, degree, params)


def start_cycle_from_hopf(
    system: SystemDefinition,
    event: BranchEvent,
    amplitude: float,
    *,
    ntst: int = 40,
    ncol: int = 4,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> MeshedSolution:
    """Small cycle near a Hopf point, corrected on the secant from the equilibrium.

    The constant equilibrium solution is kept in ``metadata["secant_from"]``
    so the cycle family can be continued away from it.
    """
    xi, params, omega, _, free = _hopf_data(event)
    mesh = uniform_mesh(ntst)
    guess = hopf_cycle_guess(event, amplitude, mesh, ncol)
    equilibrium = MeshedSolution.constant(xi, mesh, ncol, guess.params)
    problem = build_cycle_problem(system, guess, free=(free,))
    system_c = CollocationSystem(problem, mesh, ncol)
    z_eq = system_c.pack(equilibrium)
    z_guess = system_c.pack(guess)
    weights = system_c.weights()
    delta = z_guess - z_eq
    ds = weighted_norm(delta, weights)
    if ds == 0.0:
        raise DomainError("cycle amplitude must be nonzero")
    row = weights * delta / ds
    z, iterations, _ = bordered_newton(system_c, z_guess, row, row @ z_eq + ds, tol=tol, max_iter=max_iter)
    cycle = system_c.unpack(z)
    logger.info(
        "Cycle started at Hopf point %s=%.8g (omega=%.6g): T+=%.8g after %d Newton iterations",
        free, params[free], omega, cycle.params[PERIOD], iterations,
    )
    return cycle.with_metadata(secant_from=equilibrium, newton_iterations=iterations)


def secant_direction(problem: BVProblem, cycle: MeshedSolution) -> np.ndarray:
    """Unit vector from ``metadata["secant_from"]`` to *cycle* in the unknowns of *problem*."""
    origin = cycle.metadata.get("secant_from")
    if origin is None:
        raise DomainError("cycle carries no secant reference")
    system_c = CollocationSystem(problem, cycle.mesh, cycle.degree)
    delta = system_c.pack(cycle) - system_c.pack(origin)
    return delta / weighted_norm(delta, system_c.weights())
