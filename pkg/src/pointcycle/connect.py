"""Point-to-cycle connections: equilibrium eigendata, start data and the defining BVPs.

All connection problems share one composite unknown ``U = (x+, w, u)`` on
[0, 1] with n_d = 9:

* ``x+' = T+·f(x+)``                  the saddle cycle,
* ``w'  = -T+·f_u(x+)^T w + λ·w``     its scaled adjoint eigenfunction,
* ``u'  = T·f(u)``                    the truncated connection.

The equilibrium ξ, its eigenvector v and eigenvalue (``lam_eq``) enter as
free parameters constrained by algebraic boundary rows, so the problems
differ only in their boundary conditions and free-parameter lists.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm
from scipy.optimize import brentq

from pointcycle.bvp.collocation import DEFAULT_MAX_ITER, DEFAULT_TOL, newton_iterate
from pointcycle.bvp.mesh import MeshedSolution, merge, uniform_mesh
from pointcycle.bvp.problem import BVProblem
from pointcycle.continuation.events import USER_POINT, BranchEvent, events_of_kind
from pointcycle.exceptions import (
    DegenerateEigenvector,
    DomainError,
    OracleError,
    OrthogonalityViolation,
    StructuralError,
    WrongStability,
)
from pointcycle.floquet import (
    ORACLE_ATOL,
    ORACLE_RTOL,
    PERIOD,
    STABLE,
    UNSTABLE,
    AdjointEigenfunction,
    CycleSolution,
    Pinning,
    adjoint_block,
)
from pointcycle.models import SystemDefinition, eval_jacobian, eval_rhs, jacobian_derivative

logger = logging.getLogger(__name__)

CASE_U1 = "u1"
CASE_U2 = "u2"
CASES = (CASE_U1, CASE_U2)

PLANE = "plane"
COORDINATE = "coordinate"
CIRCLE = "circle"
BC_VARIANTS = (PLANE, COORDINATE, CIRCLE)

XI = ("xi1", "xi2", "xi3")
VEC = ("v1", "v2", "v3")
LAM_EQ = "lam_eq"
# Unknown in every connection problem: equilibrium data, period and log multiplier
INTERNAL = (*XI, *VEC, LAM_EQ, PERIOD, "lam")
HOMOTOPY = ("h1", "h2", "c1", "c2", "g")
RESERVED = (*INTERNAL, "s", "n_u", "T", "eps", *HOMOTOPY)

DEFAULT_EPS = 1e-4
_DEGENERATE_PIVOT = 1e-12
_ORTHOGONALITY_TOL = 1e-5

Row = Callable[[np.ndarray, np.ndarray, Mapping[str, float]], np.ndarray]


# ------------------------------------------------------------------
# Equilibrium eigendata
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True, eq=False)
class EquilibriumEigendata:
    """ξ with the eigenpair that spans (u1) or annihilates (u2) its unstable manifold.

    Case u1 stores an eigenvector of ``f_u`` for ``λ_u > 0``; case u2 an
    eigenvector of ``f_u^T`` for ``λ_s < 0``. ``eta`` is the normal of the
    departure plane used by the u2 plane condition.
    """

    xi: np.ndarray
    v: np.ndarray
    lambda_eq: float
    case: str
    eta: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.case not in CASES:
            raise DomainError(f"case must be one of {CASES}, got '{self.case}'")
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        if self.eta is not None:
            eta = np.asarray(self.eta, dtype=float)
            object.__setattr__(self, "eta", eta / np.linalg.norm(eta))

    def params(self) -> dict[str, float]:
        values = dict(zip(XI, map(float, self.xi)))
        values.update(zip(VEC, map(float, self.v)))
        values[LAM_EQ] = float(self.lambda_eq)
        return values

    def residual(self, system: SystemDefinition, params: Mapping[str, float]) -> float:
        """Max-norm of the equilibrium and eigen equations."""
        return float(np.max(np.abs(_eigen_equations(system, self.case, self.xi, self.v, self.lambda_eq, params))))

    @classmethod
    def from_params(
        cls, params: Mapping[str, float], case: str, eta: np.ndarray | None = None
    ) -> EquilibriumEigendata:
        return cls(
            xi=np.array([params[n] for n in XI]),
            v=np.array([params[n] for n in VEC]),
            lambda_eq=params[LAM_EQ],
            case=case,
            eta=eta,
        )


def _eigen_equations(system, case, xi, v, lam, params) -> np.ndarray:
    alpha = system.param_vector(params)
    a = eval_jacobian(system, xi, alpha)
    if case == CASE_U2:
        a = a.T
    return np.concatenate([eval_rhs(system, xi, alpha), a @ v - lam * v, [v @ v - 1.0]])


def _initial_eigenpair(matrix: np.ndarray, case: str) -> tuple[float, np.ndarray]:
    eigvals, eigvecs = np.linalg.eig(matrix if case == CASE_U1 else matrix.T)
    real = np.abs(eigvals.imag) <= 1e-10 * (1.0 + np.abs(eigvals))
    wanted = real & ((eigvals.real > 0.0) if case == CASE_U1 else (eigvals.real < 0.0))
    if not np.any(wanted):
        kind = "positive" if case == CASE_U1 else "negative"
        raise WrongStability(f"no real {kind} eigenvalue for case {case}: {eigvals}")
    candidates = np.flatnonzero(wanted)
    pick = candidates[np.argmax(eigvals.real[candidates])] if case == CASE_U1 else candidates[
        np.argmin(eigvals.real[candidates])
    ]
    return float(eigvals[pick].real), np.real(eigvecs[:, pick])


def _orient(v: np.ndarray) -> np.ndarray:
    v = v / np.linalg.norm(v)
    return -v if v[np.argmax(np.abs(v))] < 0.0 else v


def solve_equilibrium(
    system: SystemDefinition,
    params: Mapping[str, float],
    case: str,
    guess: Sequence[float] | np.ndarray | None = None,
    *,
    v_guess: Sequence[float] | np.ndarray | None = None,
    eta: Sequence[float] | np.ndarray | None = None,
    strong: bool = False,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> EquilibriumEigendata:
    """Newton on the 7 equations ``f = 0``, ``(A - λ)v = 0``, ``<v, v> = 1``.

    ``A = f_u(ξ)`` for case u1 and ``f_u(ξ)^T`` for case u2. With *strong*
    a case u1 equilibrium may have further unstable eigenvalues as long as
    λ dominates them; the connection then leaves along the one-dimensional
    strong unstable manifold.
    """
    if case not in CASES:
        raise DomainError(f"case must be one of {CASES}, got '{case}'")
    alpha = system.param_vector(params)
    xi0 = np.zeros(3) if guess is None else np.asarray(guess, dtype=float)
    lam0, v0 = _initial_eigenpair(eval_jacobian(system, xi0, alpha), case)
    if v_guess is not None:
        v0 = np.asarray(v_guess, dtype=float)
    v0 = _orient(v0)
    values = {**system.defaults(), **params}

    def residual(z: np.ndarray) -> np.ndarray:
        return _eigen_equations(system, case, z[:3], z[3:6], z[6], values)

    def jacobian(z: np.ndarray) -> np.ndarray:
        xi, v, lam = z[:3], z[3:6], z[6]
        a = eval_jacobian(system, xi, alpha)
        da = jacobian_derivative(system, xi, alpha)
        out = np.zeros((7, 7))
        out[:3, :3] = a
        if case == CASE_U1:
            out[3:6, :3] = np.einsum("ijk,j->ik", da, v)
            out[3:6, 3:6] = a - lam * np.eye(3)
        else:
            out[3:6, :3] = np.einsum("ijk,i->jk", da, v)
            out[3:6, 3:6] = a.T - lam * np.eye(3)
        out[3:6, 6] = -v
        out[6, 3:6] = 2.0 * v
        return out

    z, iterations, norm = newton_iterate(
        residual, jacobian, np.concatenate([xi0, v0, [lam0]]), tol=tol, max_iter=max_iter
    )
    xi, v, lam = z[:3], _orient(z[3:6]), float(z[6])
    eigvals = np.linalg.eigvals(eval_jacobian(system, xi, alpha))
    n_unstable = int(np.sum(eigvals.real > 0.0))
    expected = 1 if case == CASE_U1 else 2
    if strong and case == CASE_U1:
        _check_dominant(xi, lam, eigvals)
        if n_unstable != expected:
            logger.warning(
                "Equilibrium %s has %d unstable directions; departing along the strong unstable one",
                np.array2string(xi, precision=8), n_unstable,
            )
    elif (lam <= 0.0 if case == CASE_U1 else lam >= 0.0) or n_unstable != expected:
        raise WrongStability(
            f"equilibrium {xi} has eigenvalue {lam:.6g} and {n_unstable} unstable directions; "
            f"case {case} needs {expected}"
        )
    logger.info(
        "Equilibrium %s (case %s): lambda=%.10g after %d Newton iterations (residual %.2e)",
        np.array2string(xi, precision=8), case, lam, iterations, norm,
    )
    return EquilibriumEigendata(xi=xi, v=v, lambda_eq=lam, case=case, eta=eta)


def _check_dominant(xi: np.ndarray, lam: float, eigvals: np.ndarray) -> None:
    """λ must be positive and exceed the real part of every other eigenvalue."""
    others = np.delete(eigvals, np.argmin(np.abs(eigvals - lam)))
    if lam <= 0.0 or np.any(others.real >= lam):
        raise WrongStability(
            f"equilibrium {xi}: eigenvalue {lam:.6g} is not a dominant unstable one among {eigvals}"
        )


# ------------------------------------------------------------------
# Tangent vectors of a two-dimensional unstable manifold
# ------------------------------------------------------------------

def _pivot_pair(v: np.ndarray, pivot: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = (k for k in range(3) if k != pivot)
    a = np.zeros(3)
    b = np.zeros(3)
    a[i], a[pivot] = v[pivot], -v[i]
    b[pivot], b[j] = v[j], -v[pivot]
    return a, b


def tangent_pivot(v: np.ndarray, *, fallback: bool = True) -> int:
    """Component used to build the tangent pair; the second one unless it vanishes."""
    v = np.asarray(v, dtype=float)
    if abs(v[1]) > _DEGENERATE_PIVOT:
        return 1
    if not fallback:
        raise DegenerateEigenvector(f"second component of {v} vanishes")
    pivot = int(np.argmax(np.abs(v)))
    logger.warning("Eigenvector %s has a vanishing second component; pivoting on x%d", v, pivot + 1)
    return pivot


def split_tangents(
    v: Sequence[float] | np.ndarray, *, fallback: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Two normalized vectors orthogonal to *v*: ``(v2, -v1, 0)`` and ``(0, v3, -v2)``."""
    v = np.asarray(v, dtype=float)
    a, b = _pivot_pair(v, tangent_pivot(v, fallback=fallback))
    return a / np.linalg.norm(a), b / np.linalg.norm(b)


def tangent_frame(v: np.ndarray, pivot: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis of the plane orthogonal to *v*; the first vector is the first tangent."""
    a, b = _pivot_pair(np.asarray(v, dtype=float), pivot)
    e1 = a / np.linalg.norm(a)
    b = b - (b @ e1) * e1
    return e1, b / np.linalg.norm(b)


# ------------------------------------------------------------------
# Initial connections
# ------------------------------------------------------------------

def initial_time_u1(eq: EquilibriumEigendata, eps: float) -> float:
    """T with ``|ε|·e^{λ_u T} = 1``."""
    if eq.case != CASE_U1:
        raise DomainError("initial_time_u1 needs case u1 eigendata")
    if not 0.0 < abs(eps) < 1.0:
        raise DomainError(f"|eps| must lie in (0, 1), got {eps}")
    return math.log(1.0 / abs(eps)) / eq.lambda_eq


def initial_connection_u1(
    eq: EquilibriumEigendata, eps: float, T: float, mesh: np.ndarray, degree: int
) -> MeshedSolution:
    """``u(τ) = ξ + ε·v·e^{λ_u T τ}``."""
    if eq.case != CASE_U1:
        raise DomainError("initial_connection_u1 needs case u1 eigendata")
    if T <= 0.0:
        raise DomainError(f"connection time must be positive, got {T}")

    def tail(tau: np.ndarray) -> np.ndarray:
        return eq.xi + eps * np.exp(eq.lambda_eq * T * tau)[:, None] * eq.v

    return MeshedSolution.from_function(tail, mesh, degree, {"T": T, "eps": eps})


def linear_matrix(system: SystemDefinition, eq: EquilibriumEigendata, params: Mapping[str, float]) -> np.ndarray:
    return eval_jacobian(system, eq.xi, system.param_vector(params))


def initial_time_u2(
    system: SystemDefinition,
    params: Mapping[str, float],
    eq: EquilibriumEigendata,
    v1: np.ndarray,
    eps: float,
    t_max: float = 1e4,
) -> float:
    """T with ``|ε|·||e^{TA} v1|| = 1`` for ``A = f_u(ξ)``."""
    if not 0.0 < abs(eps) < 1.0:
        raise DomainError(f"|eps| must lie in (0, 1), got {eps}")
    a = linear_matrix(system, eq, params)

    def gap(t: float) -> float:
        return math.log(abs(eps) * float(np.linalg.norm(expm(t * a) @ v1)))

    lo, hi = 0.0, 1.0
    while gap(hi) < 0.0:
        lo, hi = hi, 2.0 * hi
        if hi > t_max:
            raise DomainError(f"linear flow from xi does not leave the unit ball before T={t_max}")
    return float(brentq(gap, lo, hi, xtol=1e-10))


def initial_connection_u2(
    system: SystemDefinition,
    params: Mapping[str, float],
    eq: EquilibriumEigendata,
    v1: np.ndarray,
    eps: float,
    T: float,
    mesh: np.ndarray,
    degree: int,
) -> MeshedSolution:
    """``u(τ) = ξ + ε·e^{τTA}·v1`` by dense integration of ``y' = T·A·y``."""
    if T <= 0.0:
        raise DomainError(f"connection time must be positive, got {T}")
    a = linear_matrix(system, eq, params)
    result = solve_ivp(
        lambda tau, y: T * (a @ y),
        (0.0, 1.0),
        np.asarray(v1, dtype=float),
        method="DOP853",
        rtol=ORACLE_RTOL,
        atol=ORACLE_ATOL,
        dense_output=True,
    )
    if not result.success:
        raise OracleError(f"linear flow integration failed: {result.message}")

    def tail(tau: np.ndarray) -> np.ndarray:
        return eq.xi + eps * result.sol(tau).T

    solution = MeshedSolution.from_function(tail, mesh, degree, {"T": T, "eps": eps})
    # Both ends exact
    values = solution.values.copy()
    values[0] = eq.xi + eps * np.asarray(v1, dtype=float)
    return solution.with_values(values)


# ------------------------------------------------------------------
# Connection state
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True, eq=False)
class ConnectionState:
    eq: EquilibriumEigendata
    cycle: CycleSolution
    eig: AdjointEigenfunction
    u: MeshedSolution
    T: float
    eps: float
    sys_params: dict[str, float]
    c1: float = 1.0
    c2: float = 0.0
    h1: float = 0.0
    h2: float = 0.0
    g: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def case(self) -> str:
        return self.eq.case

    def endpoint_gap(self) -> float:
        return float(np.linalg.norm(self.u.end - self.cycle.base_point))


def state_solution(state: ConnectionState, problem: BVProblem | None = None) -> MeshedSolution:
    """Composite ``(x+, w, u)`` solution carrying every connection parameter.

    With *problem* the homotopy scalars are taken from its parameters.
    """
    params = dict(state.sys_params)
    params.update(state.eq.params())
    params.update(
        {
            PERIOD: state.cycle.T_plus,
            "lam": state.eig.lam,
            "s": float(state.eig.s),
            "n_u": 1.0 if state.case == CASE_U1 else 2.0,
            "T": state.T,
            "eps": state.eps,
            "c1": state.c1,
            "c2": state.c2,
            "h1": state.h1,
            "h2": state.h2,
            "g": state.g,
        }
    )
    if problem is not None:
        params.update({k: problem.params[k] for k in HOMOTOPY if k in problem.params})
    composite = merge([state.cycle.x_plus.component(0, 3), state.eig.w.component(0, 3), state.u])
    return MeshedSolution(
        mesh=composite.mesh,
        degree=composite.degree,
        values=composite.values,
        params=params,
        metadata=dict(state.metadata),
    )


def connection_state(
    system: SystemDefinition, solution: MeshedSolution, eta: np.ndarray | None = None
) -> ConnectionState:
    """Split a composite solution back into its parts."""
    if solution.n_d != 9:
        raise StructuralError(f"a connection solution has 9 components, got {solution.n_d}")
    p = solution.params
    missing = [k for k in (*INTERNAL, "s", "n_u", "T", "eps") if k not in p]
    if missing:
        raise StructuralError(f"connection solution lacks parameters {missing}")
    case = CASE_U1 if p["n_u"] == 1.0 else CASE_U2
    lam = p["lam"]
    eig = AdjointEigenfunction(
        w=solution.component(3, 6),
        lam=lam,
        s=1 if p["s"] > 0 else -1,
        target=UNSTABLE if lam > 0.0 else STABLE,
        solution=solution.component(0, 6),
    )
    return ConnectionState(
        eq=EquilibriumEigendata.from_params(p, case, eta),
        cycle=CycleSolution(solution.component(0, 3)),
        eig=eig,
        u=solution.component(6, 9),
        T=p["T"],
        eps=p["eps"],
        sys_params={name: p[name] for name in system.param_names if name in p},
        c1=p.get("c1", 1.0),
        c2=p.get("c2", 0.0),
        h1=p.get("h1", 0.0),
        h2=p.get("h2", 0.0),
        g=p.get("g", 0.0),
        metadata=dict(solution.metadata),
    )


def initial_state(
    system: SystemDefinition,
    eq: EquilibriumEigendata,
    cycle: CycleSolution,
    eig: AdjointEigenfunction,
    eps: float = DEFAULT_EPS,
    T: float | None = None,
    *,
    ntst: int | None = None,
    fallback: bool = True,
) -> ConnectionState:
    """Linear-tail start data for the first homotopy (``c1 = 1``, ``c2 = 0``)."""
    sys_params = {k: v for k, v in cycle.params.items() if system.has_param(k)}
    mesh = uniform_mesh(ntst or cycle.x_plus.ntst)
    degree = cycle.x_plus.degree
    if eq.case == CASE_U1:
        T = initial_time_u1(eq, eps) if T is None else T
        u = initial_connection_u1(eq, eps, T, mesh, degree)
    else:
        v1, _ = split_tangents(eq.v, fallback=fallback)
        T = initial_time_u2(system, sys_params, eq, v1, eps) if T is None else T
        u = initial_connection_u2(system, sys_params, eq, v1, eps, T, mesh, degree)
    logger.info("Initial connection: eps=%.3g T=%.8g, u(1)=%s", eps, T, np.array2string(u.end, precision=6))
    return ConnectionState(eq=eq, cycle=cycle, eig=eig, u=u, T=T, eps=eps, sys_params=sys_params)


# ------------------------------------------------------------------
# Gaps
# ------------------------------------------------------------------

def plane_gap(system: SystemDefinition, state: ConnectionState) -> float:
    """Signed distance of u(1) from the plane through x+(0) normal to the flow.

    ``<f(x+(0)), u(1) - x+(0)> / |f(x+(0))|``; the homotopy gap ``h1``.
    """
    x0 = state.cycle.base_point
    f0 = eval_rhs(system, x0, system.param_vector(state.sys_params))
    return float(f0 @ (state.u.end - x0)) / float(np.linalg.norm(f0))


def projection_gap(state: ConnectionState) -> float:
    """``<w(0), u(1) - x+(0)>``."""
    return float(state.eig.w.start @ (state.u.end - state.cycle.base_point))


def projection_gaps(system: SystemDefinition, solution: MeshedSolution) -> tuple[float, float]:
    """Projection and plane residuals of a composite solution."""
    x0, w0, u1 = solution.start[:3], solution.start[3:6], solution.end[6:]
    f0 = eval_rhs(system, x0, system.param_vector(solution.params))
    return float(w0 @ (u1 - x0)), float(f0 @ (u1 - x0))


def integration_gap(system: SystemDefinition, state: ConnectionState) -> float:
    """Distance between u(1) and the flow of u(0) over time T, relative to the trajectory scale."""
    alpha = system.param_vector(state.sys_params)
    result = solve_ivp(
        lambda t, y: eval_rhs(system, y, alpha),
        (0.0, state.T),
        state.u.start,
        method="DOP853",
        rtol=ORACLE_RTOL,
        atol=ORACLE_ATOL,
    )
    if not result.success:
        raise OracleError(f"connection integration failed: {result.message}")
    scale = max(1.0, float(np.max(np.abs(result.y))))
    return float(np.linalg.norm(result.y[:, -1] - state.u.end)) / scale


# ------------------------------------------------------------------
# Boundary rows
# ------------------------------------------------------------------

def _eigendata(p: Mapping[str, float]) -> tuple[np.ndarray, np.ndarray, float]:
    return np.array([p[n] for n in XI]), np.array([p[n] for n in VEC]), p[LAM_EQ]


def _equilibrium_row(system: SystemDefinition, case: str) -> tuple[int, Row]:
    def row(u0, u1, p):
        xi, v, lam = _eigendata(p)
        return _eigen_equations(system, case, xi, v, lam, p)

    return 7, row


def _point_departure() -> tuple[int, Row]:
    def row(u0, u1, p):
        xi, v, _ = _eigendata(p)
        return u0[6:] - xi - p["eps"] * v

    return 3, row


def _circle_departure(pivot: int) -> tuple[int, Row]:
    def row(u0, u1, p):
        xi, v, _ = _eigendata(p)
        e1, e2 = tangent_frame(v, pivot)
        offset = u0[6:] - xi - p["eps"] * (p["c1"] * e1 + p["c2"] * e2)
        return np.append(offset, p["c1"] ** 2 + p["c2"] ** 2 - 1.0)

    return 4, row


def _plane_departure(eta: np.ndarray) -> tuple[int, Row]:
    def row(u0, u1, p):
        xi, v, _ = _eigendata(p)
        return np.array([v @ (u0[6:] - xi), eta @ (u0[6:] - xi)])

    return 2, row


def _align_gap(coordinate: int) -> tuple[int, Row]:
    def row(u0, u1, p):
        return np.array([u0[6 + coordinate] - p[XI[coordinate]] - p["g"]])

    return 1, row


def _periodicity() -> tuple[int, Row]:
    return 3, lambda u0, u1, p: u0[:3] - u1[:3]


def _pinning(phase: Pinning) -> tuple[int, Row]:
    return 1, lambda u0, u1, p: np.array([u0[phase.coordinate] - phase.value])


def _eigenfunction_rows() -> tuple[int, Row]:
    def row(u0, u1, p):
        w0 = u0[3:6]
        return np.append(u1[3:6] - p["s"] * w0, w0 @ w0 - 1.0)

    return 4, row


def _projection(gap: str | None) -> tuple[int, Row]:
    def row(u0, u1, p):
        value = u0[3:6] @ (u1[6:] - u0[:3])
        return np.array([value - (p[gap] if gap else 0.0)])

    return 1, row


def _plane_condition(system: SystemDefinition, gap: str | None, *, unit: bool = False) -> tuple[int, Row]:
    def row(u0, u1, p):
        f0 = eval_rhs(system, u0[:3], system.param_vector(p))
        value = f0 @ (u1[6:] - u0[:3])
        if unit:
            value = value / np.linalg.norm(f0)
        return np.array([value - (p[gap] if gap else 0.0)])

    return 1, row


# ------------------------------------------------------------------
# Problems
# ------------------------------------------------------------------

def _check_names(system: SystemDefinition) -> None:
    clash = sorted(set(system.param_names) & set(RESERVED))
    if clash:
        raise StructuralError(f"system parameters {clash} clash with connection parameter names")


def _composite_problem(
    system: SystemDefinition,
    name: str,
    rows: Sequence[tuple[int, Row]],
    free: Sequence[str],
    params: Mapping[str, float],
    labels: Mapping[str, object],
) -> BVProblem:
    _check_names(system)
    for p in free:
        if p not in RESERVED and not system.has_param(p):
            raise StructuralError(f"'{p}' is neither a system nor a connection parameter")
    values = {**system.defaults(), **params}

    def rhs(U, p):
        alpha = system.param_vector(p)
        x, w, u = U[:, :3], U[:, 3:6], U[:, 6:]
        jac = eval_jacobian(system, x, alpha)
        jtw = np.einsum("kij,ki->kj", jac, w)
        return np.hstack(
            [
                p[PERIOD] * eval_rhs(system, x, alpha),
                -p[PERIOD] * jtw + p["lam"] * w,
                p["T"] * eval_rhs(system, u, alpha),
            ]
        )

    def jacobian(U, p):
        alpha = system.param_vector(p)
        x, w, u = U[:, :3], U[:, 3:6], U[:, 6:]
        jac, _, djtw = adjoint_block(system, x, w, alpha)
        out = np.zeros((U.shape[0], 9, 9))
        out[:, :3, :3] = p[PERIOD] * jac
        out[:, 3:6, :3] = -p[PERIOD] * djtw
        out[:, 3:6, 3:6] = -p[PERIOD] * np.transpose(jac, (0, 2, 1)) + p["lam"] * np.eye(3)
        out[:, 6:, 6:] = p["T"] * eval_jacobian(system, u, alpha)
        return out

    def bc(u0, u1, p):
        return np.concatenate([np.atleast_1d(fn(u0, u1, p)) for _, fn in rows])

    problem = BVProblem(
        name=f"{system.name}-{name}",
        n_d=9,
        rhs=rhs,
        jacobian=jacobian,
        bc=bc,
        n_bc=sum(count for count, _ in rows),
        free=tuple(free),
        params=values,
        labels=dict(labels),
    )
    logger.debug("%s: n_bc=%d free=%s", problem.name, problem.n_bc, problem.free)
    return problem


def _departure(state: ConnectionState, variant: str | None, coordinate: int, pivot: int):
    if state.case == CASE_U1:
        return [_point_departure()], ()
    if variant == CIRCLE:
        return [_circle_departure(pivot)], ("c1", "c2")
    if variant == COORDINATE or state.eq.eta is None:
        eta = np.eye(3)[coordinate]
    else:
        eta = state.eq.eta
    return [_plane_departure(eta)], ()


def build_homotopy1(
    system: SystemDefinition,
    state: ConnectionState,
    phase: Pinning,
    active: Sequence[str] | None = None,
) -> BVProblem:
    """Cycle pinned by Ψ, plane condition relaxed by ``h1``; free ``T``, ``h1`` (and ``c1`` for u2).

    ``h1`` is the plane gap measured along the unit flow direction
    (:func:`plane_gap`), so it stays on the scale of the orbit. *active*
    replaces the leading free parameters, e.g. ``("h1", "c1", "c2")`` to
    keep T fixed in case u2; its length must match the default list.
    """
    h1 = plane_gap(system, state)
    rows = [_equilibrium_row(system, state.case)]
    if state.case == CASE_U1:
        rows.append(_point_departure())
        lead: tuple[str, ...] = ("T", "h1")
    else:
        rows.append(_circle_departure(tangent_pivot(state.eq.v)))
        lead = ("T", "h1", "c1")
    if active is not None:
        if len(active) != len(lead):
            raise StructuralError(f"homotopy 1 in case {state.case} needs {len(lead)} active parameters, got {tuple(active)}")
        lead = tuple(active)
    free = (*lead, *INTERNAL)
    rows += [_periodicity(), _pinning(phase), _eigenfunction_rows(), _plane_condition(system, "h1", unit=True)]
    params = state_solution(state).params
    params["h1"] = h1
    logger.info("Homotopy 1 (case %s): h1=%.6g at T=%.8g", state.case, h1, state.T)
    return _composite_problem(
        system, "homotopy1", rows, free, params, {"stage": "homotopy1", "case": state.case}
    )


def build_homotopy2(
    system: SystemDefinition, state: ConnectionState, alpha1: str | None = None
) -> BVProblem:
    """Plane condition exact, projection relaxed by ``h2``; T fixed.

    Free ``(h2, α1)`` for case u1 and ``(h2, c1, c2)`` for case u2.
    """
    h2 = projection_gap(state)
    rows = [_equilibrium_row(system, state.case)]
    if state.case == CASE_U1:
        if alpha1 is None:
            raise StructuralError("homotopy 2 in case u1 needs a system parameter")
        rows.append(_point_departure())
        free = ("h2", alpha1, *INTERNAL)
    else:
        rows.append(_circle_departure(tangent_pivot(state.eq.v)))
        free = ("h2", "c1", "c2", *INTERNAL)
    rows += [_periodicity(), _projection("h2"), _eigenfunction_rows(), _plane_condition(system, None)]
    params = state_solution(state).params
    params["h2"] = h2
    logger.info("Homotopy 2 (case %s): h2=%.6g", state.case, h2)
    return _composite_problem(
        system, "homotopy2", rows, free, params, {"stage": "homotopy2", "case": state.case}
    )


def build_primary(
    system: SystemDefinition,
    state: ConnectionState,
    active: Sequence[str],
    bc_variant: str = PLANE,
    *,
    coordinate: int = 1,
    align: int | None = None,
    check: bool = True,
) -> BVProblem:
    """The connection BVP with no homotopy gaps.

    *active* lists the continuation parameters placed before the internal
    unknowns: two for case u1 (e.g. ``("T", "r")``), one for case u2 with a
    plane departure, one for the circle departure (``c1``, ``c2`` are freed
    with it). ``align`` adds the gap ``g = u_j(0) - ξ_j`` to a circle
    departure; *active* then also carries ``g``.
    """
    if bc_variant not in BC_VARIANTS:
        raise StructuralError(f"unknown departure variant '{bc_variant}'; use one of {BC_VARIANTS}")
    if align is not None and (state.case != CASE_U2 or bc_variant != CIRCLE):
        raise StructuralError("the alignment gap needs the circle departure of case u2")
    if check:
        _check_orthogonality(system, state)
    departure, extra = _departure(state, bc_variant, coordinate, tangent_pivot(state.eq.v))
    rows = [_equilibrium_row(system, state.case), *departure]
    if align is not None:
        rows.append(_align_gap(align))
    rows += [_periodicity(), _projection(None), _eigenfunction_rows(), _plane_condition(system, None)]
    params = state_solution(state).params
    params.update(h1=0.0, h2=0.0)
    if align is not None:
        params["g"] = float(state.u.start[align] - state.eq.xi[align])
    variant = bc_variant if state.case == CASE_U2 else "point"
    return _composite_problem(
        system,
        "primary",
        rows,
        (*active, *extra, *INTERNAL),
        params,
        {"stage": "primary", "case": state.case, "variant": variant},
    )


def _check_orthogonality(system: SystemDefinition, state: ConnectionState, tol: float = _ORTHOGONALITY_TOL) -> None:
    x0 = state.cycle.base_point
    f0 = eval_rhs(system, x0, system.param_vector(state.sys_params))
    value = abs(float(state.eig.w.start @ f0))
    if value > tol:
        raise OrthogonalityViolation(f"<w(0), f(x+(0))> = {value:.2e}; projection plane is ill-posed")


# ------------------------------------------------------------------
# Branch helpers
# ------------------------------------------------------------------

def nearest_to_base(events: Sequence[BranchEvent]) -> BranchEvent:
    """User point whose connection ends closest to the cycle base point."""
    points = events_of_kind(events, USER_POINT)
    if not points:
        raise DomainError("branch has no user points")

    def distance(event: BranchEvent) -> float:
        end, start = event.payload.end, event.payload.start
        return float(np.linalg.norm(end[6:] - start[:3]))

    best = min(points, key=distance)
    logger.info("Closest zero at label %s: |u(1) - x+(0)| = %.4g, T=%.8g", best.label, distance(best), best.params.get("T", float("nan")))
    return best


def toward_zero(value: float) -> int:
    """Direction along a principal parameter that moves it toward 0."""
    return -1 if value > 0.0 else 1
