"""Gauss–Legendre collocation of a BVProblem and the damped Newton kernel.

The unknown vector is ``z = [U.ravel(), β_free]`` where ``U`` holds the
state at the ``N*m + 1`` representation points. The discrete system has one
equation fewer than unknowns; point solves close it with a pinning row and
continuation closes it with the pseudo-arclength row.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from pointcycle.bvp.mesh import (
    MeshedSolution,
    adapt_mesh,
    gauss_legendre,
    lagrange_basis,
    lagrange_derivative,
    resample,
)
from pointcycle.bvp.problem import BVProblem
from pointcycle.exceptions import NewtonDiverged, SingularJacobian, StructuralError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 10
DEFAULT_MAX_HALVINGS = 5
_PARAM_STEP = 1e-7
_BC_STEP = 1e-7
_INTEGRAND_STEP = 1e-7


# ------------------------------------------------------------------
# Sparse linear algebra
# ------------------------------------------------------------------

def factorize(matrix: sparse.spmatrix):
    """Sparse LU of a square matrix; singular factors raise SingularJacobian."""
    try:
        lu = splu(sparse.csc_matrix(matrix))
    except RuntimeError as exc:
        raise SingularJacobian(f"singular Jacobian: {exc}", iterations=0, residual=float("nan")) from exc
    diag = lu.U.diagonal()
    if not np.all(np.isfinite(diag)) or np.any(diag == 0.0):
        raise SingularJacobian("singular Jacobian: zero pivot", iterations=0, residual=float("nan"))
    return lu


def solve(matrix: sparse.spmatrix, rhs: np.ndarray) -> np.ndarray:
    x = factorize(matrix).solve(np.asarray(rhs, dtype=float))
    if not np.all(np.isfinite(x)):
        raise SingularJacobian("linear solve produced non-finite values", iterations=0, residual=float("nan"))
    return x


def _permutation_sign(perm: np.ndarray) -> int:
    seen = np.zeros(perm.size, dtype=bool)
    sign = 1
    for start in range(perm.size):
        if seen[start]:
            continue
        length = 0
        i = start
        while not seen[i]:
            seen[i] = True
            i = perm[i]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def determinant_sign(matrix: sparse.spmatrix) -> int:
    """Sign of det(matrix) from its LU factors; 0 when the matrix is singular."""
    try:
        lu = splu(sparse.csc_matrix(matrix))
    except RuntimeError:
        return 0
    diag = lu.U.diagonal()
    if np.any(diag == 0.0):
        return 0
    sign = int(np.prod(np.sign(diag)))
    return sign * _permutation_sign(lu.perm_r) * _permutation_sign(lu.perm_c)


# ------------------------------------------------------------------
# Newton kernel
# ------------------------------------------------------------------

def newton_iterate(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], sparse.spmatrix],
    z0: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    max_halvings: int = DEFAULT_MAX_HALVINGS,
) -> tuple[np.ndarray, int, float]:
    """Damped Newton on a square system; returns ``(z, iterations, residual max-norm)``.

    A step is taken whole when it lowers the residual max-norm, otherwise it
    is halved up to *max_halvings* times before giving up.
    """
    z = np.array(z0, dtype=float)
    r = residual(z)
    norm = float(np.max(np.abs(r))) if r.size else 0.0
    if not np.isfinite(norm):
        raise NewtonDiverged("non-finite residual at the initial guess", iterations=0, residual=norm)
    iterations = 0
    while norm > tol:
        if iterations >= max_iter:
            raise NewtonDiverged(
                f"no convergence after {iterations} iterations (residual {norm:.3e})",
                iterations=iterations,
                residual=norm,
            )
        try:
            dz = solve(jacobian(z), -r)
        except SingularJacobian as exc:
            raise SingularJacobian(str(exc), iterations=iterations, residual=norm) from exc
        damping = 1.0
        for _ in range(max_halvings + 1):
            trial = z + damping * dz
            r_trial = residual(trial)
            trial_norm = float(np.max(np.abs(r_trial)))
            if np.isfinite(trial_norm) and (trial_norm < norm or trial_norm <= tol):
                break
            damping *= 0.5
        else:
            raise NewtonDiverged(
                f"residual not reduced after {max_halvings} halvings (residual {norm:.3e})",
                iterations=iterations,
                residual=norm,
            )
        if damping < 1.0:
            logger.debug("Newton step damped to %.4g", damping)
        z, r, norm = trial, r_trial, trial_norm
        iterations += 1
        logger.debug("Newton iteration %d: residual %.3e", iterations, norm)
    return z, iterations, norm


# ------------------------------------------------------------------
# Discretized problem
# ------------------------------------------------------------------

class CollocationSystem:
    """A BVProblem discretized on a fixed mesh and degree."""

    def __init__(self, problem: BVProblem, mesh: np.ndarray, degree: int) -> None:
        self.problem = problem
        self.mesh = np.asarray(mesh, dtype=float)
        self.degree = m = int(degree)
        self.h = np.diff(self.mesh)
        self.ntst = n = self.h.size
        self.n_d = problem.n_d
        self.n_pts = n * m + 1
        self.n_u = self.n_pts * self.n_d
        self.free = problem.free
        self.size = self.n_u + problem.n_fp

        nodes, weights = gauss_legendre(m)
        self._basis = lagrange_basis(m, nodes)
        self._dbasis = lagrange_derivative(m, nodes)
        self._blocks = np.arange(n)[:, None] * m + np.arange(m + 1)[None, :]
        self.tau_gauss = (self.mesh[:-1, None] + self.h[:, None] * nodes[None, :]).ravel()
        self.quad_weights = (self.h[:, None] * weights[None, :]).ravel()
        self._refs = [c.reference_at(self.tau_gauss) for c in problem.integrals]

        d = self.n_d
        j, l, k, a, b = np.ix_(np.arange(n), np.arange(m), np.arange(m + 1), np.arange(d), np.arange(d))
        shape = (n, m, m + 1, d, d)
        self._coll_rows = np.broadcast_to((j * m + l) * d + a, shape).ravel()
        self._coll_cols = np.broadcast_to((j * m + k) * d + b, shape).ravel()
        self._eye = np.eye(d)

    # -- packing -------------------------------------------------------

    def param_index(self, name: str) -> int:
        return self.n_u + self.free.index(name)

    def pack(self, solution: MeshedSolution) -> np.ndarray:
        if solution.n_d != self.n_d:
            raise StructuralError(
                f"{self.problem.name}: solution has dimension {solution.n_d}, problem {self.n_d}"
            )
        if solution.degree != self.degree or solution.mesh.shape != self.mesh.shape or not np.allclose(
            solution.mesh, self.mesh, rtol=0.0, atol=1e-14
        ):
            solution = resample(solution, self.mesh, self.degree)
        free = [solution.params.get(p, self.problem.params[p]) for p in self.free]
        return np.concatenate([solution.values.ravel(), np.asarray(free, dtype=float)])

    def params_of(self, z: np.ndarray, overrides: Mapping[str, float] | None = None) -> dict[str, float]:
        params = dict(self.problem.params)
        if overrides:
            params.update(overrides)
        params.update(zip(self.free, (float(v) for v in z[self.n_u:])))
        return params

    def unpack(self, z: np.ndarray) -> MeshedSolution:
        return MeshedSolution(
            mesh=self.mesh,
            degree=self.degree,
            values=z[: self.n_u].reshape(self.n_pts, self.n_d).copy(),
            params=self.params_of(z),
            metadata={"problem": self.problem.name},
        )

    def weights(self) -> np.ndarray:
        w = np.full(self.size, 1.0 / self.n_pts)
        w[self.n_u:] = 1.0
        return w

    def gauss_states(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """State and its derivative at every Gauss point, each (N*m, n_d)."""
        blocks = z[: self.n_u].reshape(self.n_pts, self.n_d)[self._blocks]
        ug = np.einsum("lq,jqd->jld", self._basis, blocks).reshape(-1, self.n_d)
        dug = (np.einsum("lq,jqd->jld", self._dbasis, blocks) / self.h[:, None, None]).reshape(-1, self.n_d)
        return ug, dug

    def norm(self, z: np.ndarray) -> float:
        ug, _ = self.gauss_states(z)
        return float(np.sqrt(np.sum(self.quad_weights * np.sum(ug**2, axis=1))))

    # -- residual and Jacobian ------------------------------------------

    def _residual_with(self, z: np.ndarray, params: Mapping[str, float]) -> np.ndarray:
        ug, dug = self.gauss_states(z)
        coll = (dug - np.asarray(self.problem.rhs(ug, params))).ravel()
        u = z[: self.n_u].reshape(self.n_pts, self.n_d)
        bc = np.atleast_1d(np.asarray(self.problem.bc(u[0], u[-1], params), dtype=float))
        if bc.size != self.problem.n_bc:
            raise StructuralError(
                f"{self.problem.name}: boundary function returned {bc.size} values, declared {self.problem.n_bc}"
            )
        ic = [
            float(np.sum(self.quad_weights * c.integrand(ug, params, rv, rd)))
            for c, (rv, rd) in zip(self.problem.integrals, self._refs)
        ]
        return np.concatenate([coll, bc, np.asarray(ic, dtype=float)])

    def residual(self, z: np.ndarray, overrides: Mapping[str, float] | None = None) -> np.ndarray:
        return self._residual_with(z, self.params_of(z, overrides))

    def residual_norm(self, z: np.ndarray) -> float:
        return float(np.max(np.abs(self.residual(z))))

    def jacobian(self, z: np.ndarray, overrides: Mapping[str, float] | None = None) -> sparse.csc_matrix:
        """Exact in the state; forward differences in the free parameters."""
        params = self.params_of(z, overrides)
        n, m, d = self.ntst, self.degree, self.n_d
        ug, _ = self.gauss_states(z)
        jac_f = np.asarray(self.problem.jacobian(ug, params)).reshape(n, m, 1, d, d)
        coll = (
            (self._dbasis[None, :, :, None, None] / self.h[:, None, None, None, None]) * self._eye
            - self._basis[None, :, :, None, None] * jac_f
        )
        rows = [self._coll_rows]
        cols = [self._coll_cols]
        vals = [coll.ravel()]

        n_coll = n * m * d
        u = z[: self.n_u].reshape(self.n_pts, d)
        bc_jac = self._bc_jacobian(u[0], u[-1], params)
        bc_rows = n_coll + np.repeat(np.arange(self.problem.n_bc), 2 * d)
        bc_cols = np.tile(np.concatenate([np.arange(d), (self.n_pts - 1) * d + np.arange(d)]), self.problem.n_bc)
        rows.append(bc_rows)
        cols.append(bc_cols)
        vals.append(bc_jac.ravel())

        row0 = n_coll + self.problem.n_bc
        for i, (c, (rv, rd)) in enumerate(zip(self.problem.integrals, self._refs)):
            grad = self._integrand_gradient(c, ug, params, rv, rd)
            contrib = (
                self.quad_weights.reshape(n, m)[:, :, None, None]
                * self._basis[None, :, :, None]
                * grad.reshape(n, m, 1, d)
            )
            idx = (self._blocks[:, None, :, None] * d + np.arange(d)[None, None, None, :])
            idx = np.broadcast_to(idx, contrib.shape)
            rows.append(np.full(contrib.size, row0 + i))
            cols.append(idx.ravel())
            vals.append(contrib.ravel())

        base = self._residual_with(z, params)
        for p, name in enumerate(self.free):
            step = _PARAM_STEP * (1.0 + abs(params[name]))
            shifted = dict(params)
            shifted[name] += step
            column = (self._residual_with(z, shifted) - base) / step
            nz = np.flatnonzero(column)
            rows.append(nz)
            cols.append(np.full(nz.size, self.n_u + p))
            vals.append(column[nz])

        return sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.size - 1, self.size),
        ).tocsc()

    def _bc_jacobian(self, u0: np.ndarray, u1: np.ndarray, params: Mapping[str, float]) -> np.ndarray:
        d = self.n_d
        out = np.empty((self.problem.n_bc, 2 * d))
        point = np.concatenate([u0, u1])
        for k in range(2 * d):
            step = _BC_STEP * (1.0 + abs(point[k]))
            up, down = point.copy(), point.copy()
            up[k] += step
            down[k] -= step
            out[:, k] = (
                np.asarray(self.problem.bc(up[:d], up[d:], params), dtype=float)
                - np.asarray(self.problem.bc(down[:d], down[d:], params), dtype=float)
            ) / (2.0 * step)
        return out

    @staticmethod
    def _integrand_gradient(constraint, ug, params, rv, rd) -> np.ndarray:
        if constraint.gradient is not None:
            return np.asarray(constraint.gradient(ug, params, rv, rd), dtype=float)
        out = np.empty_like(ug)
        for a in range(ug.shape[1]):
            step = _INTEGRAND_STEP * (1.0 + np.abs(ug[:, a]))
            up, down = ug.copy(), ug.copy()
            up[:, a] += step
            down[:, a] -= step
            out[:, a] = (constraint.integrand(up, params, rv, rd) - constraint.integrand(down, params, rv, rd)) / (2.0 * step)
        return out

    # -- continuation hooks ----------------------------------------------

    def refresh(self, z: np.ndarray) -> CollocationSystem:
        problem = self.problem.refresh(self.unpack(z))
        if problem is self.problem:
            return self
        return CollocationSystem(problem, self.mesh, self.degree)

    def adapt(self, z: np.ndarray) -> tuple[CollocationSystem, np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        """New mesh for *z*; returns the new system, the moved point and a vector mover."""
        adapted = adapt_mesh(self.unpack(z))
        system = CollocationSystem(self.problem.refresh(adapted), adapted.mesh, self.degree)

        def move(vector: np.ndarray) -> np.ndarray:
            moved = resample(self.unpack(vector), adapted.mesh, self.degree)
            return np.concatenate([moved.values.ravel(), vector[self.n_u:]])

        return system, system.pack(adapted), move


# ------------------------------------------------------------------
# Public operations
# ------------------------------------------------------------------

def pinning_row(system, name: str | None = None) -> tuple[np.ndarray, int]:
    """Unit row selecting one free parameter (the principal one by default)."""
    if not system.free:
        raise StructuralError("no free parameter to pin; pass an explicit bordering row")
    index = system.param_index(name or system.free[0])
    row = np.zeros(system.size)
    row[index] = 1.0
    return row, index


def bordered_newton(
    system,
    z0: np.ndarray,
    row: np.ndarray,
    offset: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> tuple[np.ndarray, int, float]:
    """Newton on ``[G(z); row·z - offset] = 0`` for any discretization."""
    row = np.asarray(row, dtype=float)
    row_sparse = sparse.csr_matrix(row[None, :])

    def residual(z: np.ndarray) -> np.ndarray:
        return np.append(system.residual(z), row @ z - offset)

    def jacobian(z: np.ndarray) -> sparse.spmatrix:
        return sparse.vstack([system.jacobian(z), row_sparse], format="csc")

    return newton_iterate(residual, jacobian, z0, tol=tol, max_iter=max_iter)


def assemble(
    problem: BVProblem,
    solution: MeshedSolution,
    prev: MeshedSolution | None = None,
    tangent: np.ndarray | None = None,
    ds: float = 0.0,
) -> tuple[np.ndarray, sparse.csc_matrix]:
    """Residual and Jacobian of the collocation system at *solution*.

    With *prev* and *tangent* the pseudo-arclength row
    ``<tangent, W (z - z_prev)> - ds`` is appended.
    """
    system = CollocationSystem(problem, solution.mesh, solution.degree)
    z = system.pack(solution)
    res = system.residual(z)
    jac = system.jacobian(z)
    if prev is None and tangent is None:
        return res, jac
    if prev is None or tangent is None:
        raise StructuralError("the arclength row needs both the previous point and the tangent")
    tangent = np.asarray(tangent, dtype=float)
    if tangent.size != system.size:
        raise StructuralError(f"tangent has {tangent.size} entries, system {system.size}")
    row = system.weights() * tangent
    res = np.append(res, row @ (z - system.pack(prev)) - ds)
    jac = sparse.vstack([jac, sparse.csr_matrix(row[None, :])], format="csc")
    return res, jac


def newton_solve(
    problem: BVProblem,
    guess: MeshedSolution,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    *,
    pin: str | None = None,
    border: tuple[np.ndarray, float] | None = None,
) -> MeshedSolution:
    """Correct *guess* to a solution of *problem*.

    The extra equation is ``β_pin = guess value`` (the first free parameter
    unless *pin* names another) or an explicit ``border = (row, offset)``.
    """
    system = CollocationSystem(problem, guess.mesh, guess.degree)
    z0 = system.pack(guess)
    if border is None:
        row, index = pinning_row(system, pin)
        offset = z0[index]
    else:
        row, offset = border
    z, iterations, norm = bordered_newton(system, z0, row, offset, tol=tol, max_iter=max_iter)
    logger.debug("%s: converged in %d Newton iterations (residual %.2e)", problem.name, iterations, norm)
    metadata = dict(guess.metadata)
    metadata.update(newton_iterations=iterations, residual=norm)
    solution = system.unpack(z)
    params = dict(guess.params)
    params.update(solution.params)
    return MeshedSolution(
        mesh=solution.mesh, degree=solution.degree, values=solution.values, params=params, metadata=metadata
    )


def residual_norm(problem: BVProblem, solution: MeshedSolution) -> float:
    """Max-norm of the collocation residual (boundary and integral rows included)."""
    system = CollocationSystem(problem, solution.mesh, solution.degree)
    return system.residual_norm(system.pack(solution))
