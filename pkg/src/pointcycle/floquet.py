"""Limit cycles, their monodromy oracle and scaled adjoint eigenfunctions.

The adjoint eigenfunction solves ``w' = -T+·f_u(x+)^T w + λ w`` with
``w(1) = s·w(0)``. Under ``v = e^{-λτ} w`` this is the adjoint variational
equation with multiplier ``s·e^{-λ}``, the reciprocal of the monodromy
multiplier ``μ = s·e^{λ}``. Branch points of the trivial family therefore
sit at ``λ = ln|μ|`` for every multiplier μ of M with ``sign(μ) = s``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from pointcycle.bvp.collocation import newton_solve
from pointcycle.bvp.mesh import MeshedSolution, gauss_legendre, merge, representation_points
from pointcycle.bvp.problem import BVProblem, IntegralConstraint
from pointcycle.continuation.algebraic import AlgebraicPoint, AlgebraicProblem
from pointcycle.continuation.branch import continue_branch, switch_branch
from pointcycle.continuation.events import (
    BRANCH_POINT,
    USER_POINT,
    ContinuationSettings,
    UserTarget,
    events_of_kind,
)
from pointcycle.exceptions import (
    DomainError,
    NoBranchPoint,
    OracleError,
    OrthogonalityViolation,
    StructuralError,
)
from pointcycle.models import SystemDefinition, eval_jacobian, eval_rhs, jacobian_derivative

logger = logging.getLogger(__name__)

UNSTABLE = "unstable"
STABLE = "stable"
TARGETS = (UNSTABLE, STABLE)

PERIOD = "T_plus"
ORACLE_RTOL = 1e-10
ORACLE_ATOL = 1e-12
# λ scan when no monodromy oracle is available
DEFAULT_SCAN = (-15.0, 15.0)


# ------------------------------------------------------------------
# Cycles
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Pinning:
    """Phase condition ``x_j(0) = value`` (0-based coordinate)."""

    coordinate: int
    value: float


@dataclass(frozen=True, slots=True, eq=False)
class CycleSolution:
    x_plus: MeshedSolution

    def __post_init__(self) -> None:
        if self.x_plus.n_d != 3:
            raise StructuralError(f"a cycle has 3 components, got {self.x_plus.n_d}")
        if self.x_plus.params.get(PERIOD, 0.0) <= 0.0:
            raise StructuralError(f"cycle period {PERIOD} must be positive")

    @property
    def T_plus(self) -> float:
        return self.x_plus.params[PERIOD]

    @property
    def base_point(self) -> np.ndarray:
        return self.x_plus.start

    @property
    def params(self) -> dict[str, float]:
        return self.x_plus.params

    @property
    def periodicity_error(self) -> float:
        return float(np.max(np.abs(self.x_plus.start - self.x_plus.end)))


def _as_solution(cycle: CycleSolution | MeshedSolution) -> MeshedSolution:
    return cycle.x_plus if isinstance(cycle, CycleSolution) else cycle


def _phase_integral(reference: MeshedSolution, track: tuple[int, int] | None, offset: int = 0) -> IntegralConstraint:
    """``∫ <x, x_old'> dτ`` on components ``offset:offset+3``."""

    def integrand(u, p, ref, dref):
        return np.sum(u[:, offset : offset + 3] * dref, axis=1)

    def gradient(u, p, ref, dref):
        grad = np.zeros_like(u)
        grad[:, offset : offset + 3] = dref
        return grad

    return IntegralConstraint("phase", integrand, gradient, reference=reference, track=track)


def _system_params(system: SystemDefinition, params: Mapping[str, float]) -> dict[str, float]:
    values = system.defaults()
    values.update({k: float(v) for k, v in params.items()})
    return values


def build_cycle_problem(
    system: SystemDefinition,
    cycle: CycleSolution | MeshedSolution,
    free: Sequence[str],
    phase: Pinning | None = None,
) -> BVProblem:
    """Periodic BVP ``x' = T+ f(x)``, ``x(0) = x(1)`` with an integral or pinning phase condition."""
    solution = _as_solution(cycle)
    for name in free:
        system.param_index(name)
    params = _system_params(system, solution.params)
    if PERIOD not in params:
        raise StructuralError(f"cycle solution carries no period '{PERIOD}'")

    def rhs(u, p):
        return p[PERIOD] * eval_rhs(system, u, system.param_vector(p))

    def jac(u, p):
        return p[PERIOD] * eval_jacobian(system, u, system.param_vector(p))

    if phase is None:
        def bc(u0, u1, p):
            return u0 - u1

        integrals = (_phase_integral(solution.component(0, 3), track=(0, 3)),)
        n_bc = 3
    else:
        j, value = phase.coordinate, phase.value

        def bc(u0, u1, p):
            return np.append(u0 - u1, u0[j] - value)

        integrals = ()
        n_bc = 4

    return BVProblem(
        name=f"{system.name}-cycle",
        n_d=3,
        rhs=rhs,
        jacobian=jac,
        bc=bc,
        n_bc=n_bc,
        free=(*free, PERIOD),
        params=params,
        integrals=integrals,
        labels={"phase": "integral" if phase is None else f"x{phase.coordinate + 1}(0)={phase.value}"},
    )


def rephase(
    cycle: CycleSolution | MeshedSolution, coordinate: int, value: float, direction: str = "up"
) -> MeshedSolution:
    """Shift the time origin to the first crossing of ``x_j = value`` in *direction*."""
    solution = _as_solution(cycle)
    if direction not in ("up", "down"):
        raise DomainError(f"direction must be 'up' or 'down', got '{direction}'")
    tau = solution.points
    g = solution.values[:, coordinate] - value
    sign = 1.0 if direction == "up" else -1.0
    crossing = None
    for i in range(tau.size - 1):
        if g[i] * sign <= 0.0 < g[i + 1] * sign:
            crossing = (tau[i], tau[i + 1])
            break
    if crossing is None:
        raise DomainError(f"x{coordinate + 1} never crosses {value} going {direction}")

    def gap(t: float) -> float:
        return float(solution(t)[coordinate] - value)

    lo, hi = crossing
    tau_star = lo if gap(lo) == 0.0 else brentq(gap, lo, hi, xtol=1e-15)
    interior = np.sort(np.mod(solution.mesh[1:-1] - tau_star, 1.0))
    interior = interior[(interior > 1e-9) & (interior < 1.0 - 1e-9)]
    mesh = np.concatenate([[0.0], interior, [1.0]])
    points = representation_points(mesh, solution.degree)
    values = solution(np.mod(points + tau_star, 1.0))
    values[0, coordinate] = values[-1, coordinate] = value
    logger.debug("Cycle rephased at tau=%.10f", tau_star)
    return MeshedSolution(
        mesh=mesh,
        degree=solution.degree,
        values=values,
        params=solution.params,
        metadata={**solution.metadata, "rephased_at": tau_star},
    )


def correct_cycle(
    system: SystemDefinition,
    cycle: CycleSolution | MeshedSolution,
    free: Sequence[str],
    phase: Pinning | None = None,
    tol: float = 1e-9,
    max_iter: int = 10,
) -> CycleSolution:
    """Newton-correct a cycle with its system parameter pinned."""
    problem = build_cycle_problem(system, cycle, free, phase)
    return CycleSolution(newton_solve(problem, _as_solution(cycle), tol=tol, max_iter=max_iter))


# ------------------------------------------------------------------
# Monodromy oracle
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True, eq=False)
class MonodromyReport:
    M: np.ndarray
    multipliers: np.ndarray
    N: np.ndarray
    eigenvectors: np.ndarray = field(repr=False)

    @property
    def trivial_error(self) -> float:
        return float(np.min(np.abs(self.multipliers - 1.0)))

    def nontrivial(self) -> tuple[complex, complex]:
        """The two multipliers other than the one closest to 1, largest modulus first."""
        idx = np.argsort(np.abs(self.multipliers - 1.0))[1:]
        pair = sorted(self.multipliers[idx], key=abs, reverse=True)
        return pair[0], pair[1]

    def right_eigenvector(self, multiplier: complex) -> np.ndarray:
        i = int(np.argmin(np.abs(self.multipliers - multiplier)))
        vec = np.real_if_close(self.eigenvectors[:, i], tol=1e6)
        return vec / np.linalg.norm(vec)


def monodromy(
    system: SystemDefinition,
    cycle: CycleSolution | MeshedSolution,
    params: Mapping[str, float] | None = None,
) -> MonodromyReport:
    """Integrate ``Y' = T·A·Y`` and ``Z' = -T·A^T·Z`` over one period."""
    solution = _as_solution(cycle)
    values = dict(solution.params)
    values.update(params or {})
    alpha = system.param_vector(values)
    period = values[PERIOD]

    def rhs(tau: float, y: np.ndarray) -> np.ndarray:
        a = eval_jacobian(system, solution(min(max(tau, 0.0), 1.0)), alpha)
        ym = y[:9].reshape(3, 3)
        zm = y[9:].reshape(3, 3)
        return np.concatenate([(period * a @ ym).ravel(), (-period * a.T @ zm).ravel()])

    y0 = np.concatenate([np.eye(3).ravel(), np.eye(3).ravel()])
    result = solve_ivp(rhs, (0.0, 1.0), y0, method="DOP853", rtol=ORACLE_RTOL, atol=ORACLE_ATOL)
    if not result.success:
        raise OracleError(f"monodromy integration failed: {result.message}")
    m = result.y[:9, -1].reshape(3, 3)
    n = result.y[9:, -1].reshape(3, 3)
    eigvals, eigvecs = np.linalg.eig(m)
    order = np.argsort(-np.abs(eigvals))
    report = MonodromyReport(M=m, multipliers=eigvals[order], N=n, eigenvectors=eigvecs[:, order])
    logger.info("Monodromy multipliers: %s", ", ".join(f"{mu:.10g}" for mu in report.multipliers))
    return report


def is_saddle(report: MonodromyReport, imag_tol: float = 1e-8) -> bool:
    """Both nontrivial multipliers real, one outside and one inside the unit circle."""
    mu_u, mu_s = report.nontrivial()
    if abs(mu_u.imag) > imag_tol * abs(mu_u) or abs(mu_s.imag) > imag_tol * max(abs(mu_s), 1e-300):
        return False
    return abs(mu_u) > 1.0 > abs(mu_s)


def adjoint_inverse_check(report: MonodromyReport, rtol: float = 1e-6) -> bool:
    """N = (M^{-1})^T entrywise and the eigenvalues of N are those of M inverted, both relative to matrix scale."""
    inverse_t = np.linalg.inv(report.M).T
    entry_err = np.max(np.abs(report.N - inverse_t)) / np.max(np.abs(report.N))
    if entry_err > rtol:
        logger.warning("N differs from M^-T by %.3e", entry_err)
        return False
    mu = report.multipliers
    nu = np.linalg.eigvals(report.N)
    for m in mu:
        forward = np.min(np.abs(m - 1.0 / nu)) / np.max(np.abs(mu))
        backward = np.min(np.abs(nu - 1.0 / m)) / np.max(np.abs(nu))
        if min(forward, backward) > rtol:
            logger.warning("Multiplier %s has no reciprocal among %s", m, nu)
            return False
    return True


def product_law_residual(
    system: SystemDefinition,
    cycle: CycleSolution | MeshedSolution,
    report: MonodromyReport,
) -> float:
    """``|Πμ - exp(∫ T+ div f dτ)| / exp(...)`` with the collocation quadrature."""
    solution = _as_solution(cycle)
    alpha = system.param_vector(solution.params)
    nodes, weights = gauss_legendre(solution.degree)
    h = np.diff(solution.mesh)
    tau = (solution.mesh[:-1, None] + h[:, None] * nodes[None, :]).ravel()
    quad = (h[:, None] * weights[None, :]).ravel()
    integral = solution.params[PERIOD] * float(np.sum(quad * system.divergence(solution(tau), alpha)))
    expected = math.exp(integral)
    product = np.prod(report.multipliers)
    return float(abs(product - expected) / expected)


def write_report(report: MonodromyReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# monodromy matrix M"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in report.M]
    lines.append("# adjoint monodromy matrix N")
    lines += [" ".join(f"{v:.17g}" for v in row) for row in report.N]
    lines.append("# multipliers (real imag)")
    lines += [f"{mu.real:.17g} {mu.imag:.17g}" for mu in report.multipliers]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def multiplier_eigenvector(
    matrix: np.ndarray, target: float, settings: ContinuationSettings | None = None
) -> tuple[float, np.ndarray]:
    """Real eigenpair of *matrix* nearest *target* by branch switching on ``(M - μ)v = 0``."""
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    width = 0.25 * abs(target) + 1e-3
    lo, hi = target - width, target + width

    def func(x, p):
        return np.append(matrix @ x - p["mu"] * x, x @ x - p["h"])

    def jac(x, p):
        return np.vstack([matrix - p["mu"] * np.eye(n), 2.0 * x[None, :]])

    problem = AlgebraicProblem(
        name="multiplier",
        n=n,
        func=func,
        free=("mu", "h"),
        params={"mu": lo, "h": 0.0},
        jacobian=jac,
        n_eq=n + 1,
    )
    scan = settings or ContinuationSettings(
        ds0=width / 40, ds_min=1e-10, ds_max=width / 20, max_steps=200,
        detect=frozenset({BRANCH_POINT}), bounds={"mu": (lo - 1e-12, hi)},
    )
    events = continue_branch(problem, AlgebraicPoint(np.zeros(n), {"mu": lo, "h": 0.0}), 1, scan)
    points = events_of_kind(events, BRANCH_POINT)
    if not points:
        raise NoBranchPoint(f"no real eigenvalue within [{lo:.6g}, {hi:.6g}]")
    bp = min(points, key=lambda e: abs(e.params["mu"] - target))
    switched = switch_branch(bp, ContinuationSettings(ds0=0.05, ds_min=1e-10, ds_max=0.2, detect=frozenset()))
    grow = ContinuationSettings(
        ds0=0.05, ds_min=1e-10, ds_max=0.2, max_steps=200, detect=frozenset(),
        user_targets=(UserTarget("h", 1.0),),
    )
    branch = continue_branch(switched.discretization, switched.z, switched.tangent, grow)
    final = events_of_kind(branch, USER_POINT)
    if not final:
        raise NoBranchPoint("secondary eigenvector branch did not reach h = 1")
    point = final[-1].payload
    v = point.x / np.linalg.norm(point.x)
    if v[np.argmax(np.abs(v))] < 0.0:
        v = -v
    return point.params["mu"], v


# ------------------------------------------------------------------
# Adjoint eigenfunction
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True, eq=False)
class AdjointEigenfunction:
    w: MeshedSolution
    lam: float
    s: int
    target: str
    solution: MeshedSolution | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.s not in (1, -1):
            raise DomainError(f"s must be +1 or -1, got {self.s}")
        if self.target not in TARGETS:
            raise DomainError(f"target must be one of {TARGETS}, got '{self.target}'")

    @property
    def multiplier(self) -> float:
        """Monodromy multiplier μ = s·e^λ."""
        return self.s * math.exp(self.lam)

    @property
    def adjoint_multiplier(self) -> float:
        return self.s * math.exp(-self.lam)


def adjoint_block(system: SystemDefinition, x: np.ndarray, w: np.ndarray, alpha: np.ndarray):
    """J(x), J(x)^T w and d(J^T w)/dx for stacks of states."""
    jac = eval_jacobian(system, x, alpha)
    jtw = np.einsum("kij,ki->kj", jac, w)
    djtw = np.einsum("kijl,ki->kjl", jacobian_derivative(system, x, alpha), w)
    return jac, jtw, djtw


def build_eigenfunction_homotopy(
    system: SystemDefinition,
    cycle: CycleSolution | MeshedSolution,
    target: str = UNSTABLE,
    s: int = 1,
    lam: float = 0.0,
    h: float = 0.0,
) -> BVProblem:
    """Cycle plus ``w' = -T+ J^T w + λw``, ``w(1) = s w(0)``, ``<w(0), w(0)> = h``.

    Unknown ``(x+, w)`` with n_d = 6, free ``(lam, h, T_plus)``.
    """
    if s not in (1, -1):
        raise DomainError(f"s must be +1 or -1, got {s}")
    if target not in TARGETS:
        raise DomainError(f"target must be one of {TARGETS}, got '{target}'")
    solution = _as_solution(cycle)
    params = _system_params(system, solution.params)
    params.update(lam=lam, h=h)

    def rhs(u, p):
        alpha = system.param_vector(p)
        x, w = u[:, :3], u[:, 3:]
        jac = eval_jacobian(system, x, alpha)
        jtw = np.einsum("kij,ki->kj", jac, w)
        return np.hstack([p[PERIOD] * eval_rhs(system, x, alpha), -p[PERIOD] * jtw + p["lam"] * w])

    def jacobian(u, p):
        alpha = system.param_vector(p)
        x, w = u[:, :3], u[:, 3:]
        jac, _, djtw = adjoint_block(system, x, w, alpha)
        out = np.zeros((u.shape[0], 6, 6))
        out[:, :3, :3] = p[PERIOD] * jac
        out[:, 3:, :3] = -p[PERIOD] * djtw
        out[:, 3:, 3:] = -p[PERIOD] * np.transpose(jac, (0, 2, 1)) + p["lam"] * np.eye(3)
        return out

    def bc(u0, u1, p):
        return np.concatenate([u0[:3] - u1[:3], u1[3:] - s * u0[3:], [u0[3:] @ u0[3:] - p["h"]]])

    return BVProblem(
        name=f"{system.name}-eigenfunction",
        n_d=6,
        rhs=rhs,
        jacobian=jacobian,
        bc=bc,
        n_bc=7,
        free=("lam", "h", PERIOD),
        params=params,
        integrals=(_phase_integral(solution.component(0, 3), track=(0, 3)),),
        labels={"target": target, "s": s},
    )


def unscaled_eigen_bvp(
    system: SystemDefinition,
    cycle: CycleSolution | MeshedSolution,
    mu: float,
    *,
    adjoint: bool = True,
    shifted: bool = False,
) -> BVProblem:
    """Eigenvalue problem with the multiplier μ of M explicit in the boundary condition.

    ``adjoint=True``: ``v' = -T+ J^T v`` with ``μ·v(1) = v(0)``;
    ``adjoint=False``: ``v' = T+ J v`` with ``v(1) = μ·v(0)``. Free
    parameters are ``(mu, h, T_plus)``; pin ``h`` for a point solve.
    ``shifted=True`` returns the periodic (μ > 0) or anti-periodic (μ < 0)
    scaled form with ``λ = ln|μ|``.
    """
    if mu == 0.0:
        raise DomainError("multiplier must be nonzero")
    if shifted:
        return build_eigenfunction_homotopy(
            system, cycle, s=1 if mu > 0 else -1, lam=math.log(abs(mu)), h=1.0
        )
    solution = _as_solution(cycle)
    params = _system_params(system, solution.params)
    params.update(mu=mu, h=1.0)
    sign = -1.0 if adjoint else 1.0

    def rhs(u, p):
        alpha = system.param_vector(p)
        x, v = u[:, :3], u[:, 3:]
        jac = eval_jacobian(system, x, alpha)
        lin = np.einsum("kij,ki->kj", jac, v) if adjoint else np.einsum("kij,kj->ki", jac, v)
        return np.hstack([p[PERIOD] * eval_rhs(system, x, alpha), sign * p[PERIOD] * lin])

    def jacobian(u, p):
        alpha = system.param_vector(p)
        x, v = u[:, :3], u[:, 3:]
        jac = eval_jacobian(system, x, alpha)
        dj = jacobian_derivative(system, x, alpha)
        out = np.zeros((u.shape[0], 6, 6))
        out[:, :3, :3] = p[PERIOD] * jac
        if adjoint:
            out[:, 3:, :3] = -p[PERIOD] * np.einsum("kijl,ki->kjl", dj, v)
            out[:, 3:, 3:] = -p[PERIOD] * np.transpose(jac, (0, 2, 1))
        else:
            out[:, 3:, :3] = p[PERIOD] * np.einsum("kijl,kj->kil", dj, v)
            out[:, 3:, 3:] = p[PERIOD] * jac
        return out

    def bc(u0, u1, p):
        if adjoint:
            gap = p["mu"] * u1[3:] - u0[3:]
        else:
            gap = u1[3:] - p["mu"] * u0[3:]
        return np.concatenate([u0[:3] - u1[:3], gap, [u0[3:] @ u0[3:] - p["h"]]])

    return BVProblem(
        name=f"{system.name}-{'adjoint' if adjoint else 'variational'}-eigen",
        n_d=6,
        rhs=rhs,
        jacobian=jacobian,
        bc=bc,
        n_bc=7,
        free=("mu", "h", PERIOD),
        params=params,
        integrals=(_phase_integral(solution.component(0, 3), track=(0, 3)),),
    )


def _scan_range(report: MonodromyReport | None, lam_target: float | None) -> tuple[float, float]:
    if report is None:
        return DEFAULT_SCAN
    logs = [abs(math.log(abs(m))) for m in report.nontrivial()]
    half = 1.2 * max(max(logs), abs(lam_target or 0.0))
    return -half, half


def compute_eigenfunction(
    system: SystemDefinition,
    cycle: CycleSolution | MeshedSolution,
    target: str = UNSTABLE,
    settings: ContinuationSettings | None = None,
    *,
    report: MonodromyReport | None = None,
    use_oracle: bool = True,
    flow_tol: float = 1e-6,
    eigvec_tol: float = 1e-5,
    drift_tol: float = 1e-6,
    scan_step: float = 0.02,
) -> AdjointEigenfunction:
    """Scaled adjoint eigenfunction by branch switching from the trivial family ``w ≡ 0``."""
    if target not in TARGETS:
        raise DomainError(f"target must be one of {TARGETS}, got '{target}'")
    solution = _as_solution(cycle)
    if report is None and use_oracle:
        report = monodromy(system, solution)

    lam_target = None
    s = 1
    if report is not None:
        mu_u, mu_s = report.nontrivial()
        mu_target = mu_u if target == UNSTABLE else mu_s
        if abs(complex(mu_target).imag) > 1e-8 * abs(mu_target):
            raise NoBranchPoint(f"{target} multiplier {mu_target} is not real")
        mu_target = float(np.real(mu_target))
        s = 1 if mu_target > 0 else -1
        lam_target = math.log(abs(mu_target))
    lo, hi = _scan_range(report, lam_target)
    width = hi - lo
    ds_max = min(scan_step, width / 20.0)

    problem = build_eigenfunction_homotopy(system, solution, target, s, lam=lo, h=0.0)
    zeros = MeshedSolution.constant(np.zeros(3), solution.mesh, solution.degree)
    trivial = merge([solution, zeros]).with_params(lam=lo, h=0.0)
    scan = ContinuationSettings(
        ds0=ds_max / 2,
        ds_min=1e-10,
        ds_max=ds_max,
        max_steps=int(3 * width / ds_max) + 50,
        detect=frozenset({BRANCH_POINT}),
        bounds={"lam": (lo - 1e-9, hi)},
        tol=settings.tol if settings else 1e-9,
    )
    events = continue_branch(problem, trivial, 1, scan)
    points = events_of_kind(events, BRANCH_POINT)
    logger.info("Branch points of the trivial family at lam = %s", [round(e.params["lam"], 8) for e in points])
    if not points:
        raise NoBranchPoint(f"no branch point for lam in [{lo:.4g}, {hi:.4g}]")
    if lam_target is None:
        bp = max(points, key=lambda e: e.params["lam"]) if target == UNSTABLE else min(points, key=lambda e: e.params["lam"])
    else:
        bp = min(points, key=lambda e: abs(e.params["lam"] - lam_target))
        if abs(bp.params["lam"] - lam_target) > 0.05 * max(1.0, abs(lam_target)):
            raise NoBranchPoint(f"no branch point near lam = {lam_target:.6g}")

    grow = settings or ContinuationSettings(ds0=0.05, ds_min=1e-10, ds_max=0.2, max_steps=300)
    grow = ContinuationSettings(
        ds0=grow.ds0,
        ds_min=grow.ds_min,
        ds_max=grow.ds_max,
        max_steps=grow.max_steps,
        detect=frozenset(),
        user_targets=(UserTarget("h", 1.0),),
        tol=grow.tol,
        max_iter=grow.max_iter,
    )
    switched = switch_branch(bp, grow)
    branch = continue_branch(switched.discretization, switched.z, switched.tangent, grow)
    final = events_of_kind(branch, USER_POINT)
    if not final:
        raise NoBranchPoint("secondary eigenfunction branch did not reach h = 1")
    composite = final[-1].payload
    lam = composite.params["lam"]
    drift = max(abs(e.params["lam"] - lam) for e in branch)
    logger.info("Eigenfunction at lam=%.10g (drift along the branch %.2e)", lam, drift)
    if drift > drift_tol:
        raise NoBranchPoint(f"lam drifted by {drift:.2e} along the secondary branch; it left the branch point")

    values = composite.values.copy()
    w0 = values[0, 3:]
    if w0[np.argmax(np.abs(w0))] < 0.0:
        values[:, 3:] *= -1.0
    composite = composite.with_values(values)
    eig = AdjointEigenfunction(
        w=composite.component(3, 6), lam=lam, s=s, target=target, solution=composite
    )
    if report is not None:
        check_orthogonality(system, composite.component(0, 3), eig, report, flow_tol, eigvec_tol)
    return eig


def check_orthogonality(
    system: SystemDefinition,
    cycle: CycleSolution | MeshedSolution,
    eig: AdjointEigenfunction,
    report: MonodromyReport,
    flow_tol: float = 1e-6,
    eigvec_tol: float = 1e-5,
) -> tuple[float, float]:
    """``w(0)`` must be orthogonal to ``f(x+(0))`` and to the complementary unit eigenvector of M.

    Both are raw inner products, bounded by *flow_tol* and *eigvec_tol*.
    """
    solution = _as_solution(cycle)
    w0 = eig.w.start
    f0 = eval_rhs(system, solution.start, system.param_vector(solution.params))
    along_flow = abs(float(w0 @ f0))
    mu_u, mu_s = report.nontrivial()
    complementary = mu_s if eig.target == UNSTABLE else mu_u
    along_eigvec = abs(float(np.real(w0 @ report.right_eigenvector(complementary))))
    logger.info("Orthogonality: <w0,f>=%.2e <w0,e>=%.2e", along_flow, along_eigvec)
    if along_flow > flow_tol or along_eigvec > eigvec_tol:
        raise OrthogonalityViolation(
            f"w(0) not orthogonal to the stable tangent plane: <w0,f>={along_flow:.2e}, <w0,e>={along_eigvec:.2e}"
        )
    return along_flow, along_eigvec
