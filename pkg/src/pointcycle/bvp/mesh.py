"""Piecewise-polynomial solutions on adaptive meshes of [0, 1].

A solution over ``N`` mesh intervals with degree ``m`` stores its state at
``N*m + 1`` representation points: the knots plus ``m - 1`` equidistant
interior points per interval. Neighbouring intervals share their common knot,
so the representation is continuous by construction.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from pointcycle.exceptions import DomainError, StructuralError

logger = logging.getLogger(__name__)

# Knots closer than this are treated as one when meshes are united.
_KNOT_TOL = 1e-12


# ------------------------------------------------------------------
# Local Lagrange bases on equidistant nodes k/m
# ------------------------------------------------------------------

def lagrange_basis(m: int, s: np.ndarray) -> np.ndarray:
    """Basis values, shape (len(s), m+1), on the nodes k/m of [0, 1]."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    nodes = np.arange(m + 1) / m
    out = np.ones((s.size, m + 1))
    for k in range(m + 1):
        for i in range(m + 1):
            if i != k:
                out[:, k] *= (s - nodes[i]) / (nodes[k] - nodes[i])
    return out


def lagrange_derivative(m: int, s: np.ndarray) -> np.ndarray:
    """d/ds of the basis, shape (len(s), m+1)."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    nodes = np.arange(m + 1) / m
    out = np.zeros((s.size, m + 1))
    for k in range(m + 1):
        for j in range(m + 1):
            if j == k:
                continue
            term = np.full(s.size, 1.0 / (nodes[k] - nodes[j]))
            for i in range(m + 1):
                if i != k and i != j:
                    term *= (s - nodes[i]) / (nodes[k] - nodes[i])
            out[:, k] += term
    return out


@lru_cache(maxsize=16)
def gauss_legendre(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (x + 1.0), 0.5 * w


def uniform_mesh(ntst: int) -> np.ndarray:
    if ntst < 1:
        raise StructuralError(f"a mesh needs at least one interval, got {ntst}")
    return np.linspace(0.0, 1.0, ntst + 1)


def representation_points(mesh: np.ndarray, degree: int) -> np.ndarray:
    h = np.diff(mesh)
    local = np.arange(degree) / degree
    inner = (mesh[:-1, None] + h[:, None] * local[None, :]).ravel()
    return np.append(inner, 1.0)


# ------------------------------------------------------------------
# Solution container
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True, eq=False)
class MeshedSolution:
    """State of dimension n_d on [0, 1] plus the full parameter set."""

    mesh: np.ndarray
    degree: int
    values: np.ndarray
    params: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        mesh = np.asarray(self.mesh, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if mesh.ndim != 1 or mesh.size < 2:
            raise StructuralError("mesh must be a 1-D array with at least two knots")
        if mesh[0] != 0.0 or mesh[-1] != 1.0:
            raise StructuralError(f"mesh must start at 0 and end at 1, got [{mesh[0]}, {mesh[-1]}]")
        if np.any(np.diff(mesh) <= 0.0):
            raise StructuralError("mesh knots must be strictly increasing")
        if self.degree < 1:
            raise StructuralError(f"degree must be positive, got {self.degree}")
        expected = (mesh.size - 1) * self.degree + 1
        if values.shape[0] != expected:
            raise StructuralError(
                f"{values.shape[0]} value rows for {mesh.size - 1} intervals of degree "
                f"{self.degree} (expected {expected})"
            )
        object.__setattr__(self, "mesh", mesh)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "params", {k: float(v) for k, v in self.params.items()})

    @property
    def ntst(self) -> int:
        return self.mesh.size - 1

    @property
    def n_d(self) -> int:
        return self.values.shape[1]

    @property
    def points(self) -> np.ndarray:
        return representation_points(self.mesh, self.degree)

    @property
    def start(self) -> np.ndarray:
        return self.values[0].copy()

    @property
    def end(self) -> np.ndarray:
        return self.values[-1].copy()

    def __call__(self, tau: float | np.ndarray) -> np.ndarray:
        return interpolate(self, tau)

    def derivative(self, tau: float | np.ndarray) -> np.ndarray:
        """dU/dtau of the local polynomial."""
        return _evaluate(self, tau, derivative=True)

    def l2_norm(self) -> float:
        nodes, weights = gauss_legendre(self.degree + 1)
        h = np.diff(self.mesh)
        tau = (self.mesh[:-1, None] + h[:, None] * nodes[None, :]).ravel()
        sq = np.sum(interpolate(self, tau) ** 2, axis=1).reshape(self.ntst, -1)
        return float(np.sqrt(np.sum(h[:, None] * weights[None, :] * sq)))

    def component(self, start: int, stop: int) -> MeshedSolution:
        """Sub-state ``values[:, start:stop]`` on the same mesh."""
        return replace(self, values=self.values[:, start:stop].copy())

    def with_params(self, **updates: float) -> MeshedSolution:
        params = dict(self.params)
        params.update({k: float(v) for k, v in updates.items()})
        return replace(self, params=params)

    def with_values(self, values: np.ndarray) -> MeshedSolution:
        return replace(self, values=np.asarray(values, dtype=float))

    def with_metadata(self, **items) -> MeshedSolution:
        metadata = dict(self.metadata)
        metadata.update(items)
        return replace(self, metadata=metadata)

    @classmethod
    def from_function(
        cls,
        func: Callable[[np.ndarray], np.ndarray],
        mesh: np.ndarray,
        degree: int,
        params: Mapping[str, float] | None = None,
    ) -> MeshedSolution:
        """Sample ``func(tau) -> (k, n_d)`` at the representation points."""
        mesh = np.asarray(mesh, dtype=float)
        tau = representation_points(mesh, degree)
        values = np.asarray(func(tau), dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return cls(mesh=mesh, degree=degree, values=values, params=dict(params or {}))

    @classmethod
    def constant(
        cls,
        state: Sequence[float] | np.ndarray,
        mesh: np.ndarray,
        degree: int,
        params: Mapping[str, float] | None = None,
    ) -> MeshedSolution:
        state = np.atleast_1d(np.asarray(state, dtype=float))
        n_pts = (len(mesh) - 1) * degree + 1
        return cls(
            mesh=np.asarray(mesh, dtype=float),
            degree=degree,
            values=np.tile(state, (n_pts, 1)),
            params=dict(params or {}),
        )


# ------------------------------------------------------------------
# Evaluation
# ------------------------------------------------------------------

def _evaluate(sol: MeshedSolution, tau: float | np.ndarray, *, derivative: bool) -> np.ndarray:
    scalar = np.ndim(tau) == 0
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if np.any(tau < 0.0) or np.any(tau > 1.0) or np.any(np.isnan(tau)):
        raise DomainError(f"tau must lie in [0, 1], got range [{tau.min()}, {tau.max()}]")
    m = sol.degree
    h = np.diff(sol.mesh)
    j = np.clip(np.searchsorted(sol.mesh, tau, side="right") - 1, 0, sol.ntst - 1)
    s = (tau - sol.mesh[j]) / h[j]
    if derivative:
        basis = lagrange_derivative(m, s) / h[j][:, None]
    else:
        basis = lagrange_basis(m, s)
    idx = j[:, None] * m + np.arange(m + 1)[None, :]
    out = np.einsum("kq,kqd->kd", basis, sol.values[idx])
    return out[0] if scalar else out


def interpolate(sol: MeshedSolution, tau: float | np.ndarray) -> np.ndarray:
    """Value of the containing interval's polynomial at *tau* in [0, 1]."""
    return _evaluate(sol, tau, derivative=False)


def resample(sol: MeshedSolution, mesh: np.ndarray, degree: int | None = None) -> MeshedSolution:
    """Re-interpolate *sol* onto another mesh (and optionally another degree)."""
    degree = sol.degree if degree is None else degree
    mesh = np.asarray(mesh, dtype=float)
    values = interpolate(sol, representation_points(mesh, degree))
    return replace(sol, mesh=mesh, degree=degree, values=values)


# ------------------------------------------------------------------
# Mesh adaptation and merging
# ------------------------------------------------------------------

def adapt_mesh(sol: MeshedSolution) -> MeshedSolution:
    """Equidistribute the m-th derivative indicator over the same number of intervals."""
    m, n = sol.degree, sol.ntst
    h = np.diff(sol.mesh)
    blocks = sol.values[np.arange(n)[:, None] * m + np.arange(m + 1)[None, :]]
    # The m-th derivative of a degree-m polynomial is constant per interval.
    dm = np.diff(blocks, n=m, axis=1)[:, 0, :] / (h[:, None] / m) ** m
    density = np.linalg.norm(dm, axis=1) ** (1.0 / (m + 1))
    if not np.any(density > 1e-10):
        logger.debug("Flat mesh indicator; returning a uniform mesh")
        return resample(sol, uniform_mesh(n))

    padded = np.concatenate([density[:1], density, density[-1:]])
    smooth = 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]
    smooth = smooth + 0.05 * smooth.mean()

    cumulative = np.concatenate([[0.0], np.cumsum(smooth * h)])
    targets = cumulative[-1] * np.arange(n + 1) / n
    new_mesh = np.interp(targets, cumulative, sol.mesh)
    new_mesh[0], new_mesh[-1] = 0.0, 1.0
    return resample(sol, new_mesh)


def union_mesh(meshes: Sequence[np.ndarray]) -> np.ndarray:
    knots = np.unique(np.concatenate([np.asarray(m, dtype=float) for m in meshes]))
    keep = np.concatenate([[True], np.diff(knots) > _KNOT_TOL])
    knots = knots[keep]
    knots[0], knots[-1] = 0.0, 1.0
    return knots


def merge(
    components: Sequence[MeshedSolution], mesh: np.ndarray | None = None
) -> MeshedSolution:
    """Stack components into one state on a common mesh.

    Without an explicit *mesh* the common mesh is the union of the
    component meshes. Parameters are merged with earlier components winning.
    """
    if not components:
        raise StructuralError("cannot merge an empty list of solutions")
    if len(components) == 1 and mesh is None:
        return components[0]
    degree = components[0].degree
    common = union_mesh([c.mesh for c in components]) if mesh is None else np.asarray(mesh, float)
    tau = representation_points(common, degree)
    values = np.hstack([interpolate(c, tau) for c in components])
    params: dict[str, float] = {}
    metadata: dict = {}
    for c in components:
        for k, v in c.params.items():
            params.setdefault(k, v)
        for k, v in c.metadata.items():
            metadata.setdefault(k, v)
    return MeshedSolution(mesh=common, degree=degree, values=values, params=params, metadata=metadata)
