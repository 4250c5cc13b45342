"""Two-parameter continuation of folds.

At a fold of ``G(y, α1) = 0`` the Jacobian ``G_y`` (all unknowns except α1)
has a null vector φ. The fold curve solves ``G = 0``, ``G_y φ = 0`` and
``<φ, φ>_W = 1`` with a second parameter α2 freed.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping

import numpy as np
from scipy import sparse

from pointcycle.continuation.algebraic import AlgebraicPoint
from pointcycle.continuation.branch import continue_branch, principal_name, weighted_norm
from pointcycle.continuation.discretization import Discretization
from pointcycle.continuation.events import FOLD, BranchEvent, ContinuationSettings
from pointcycle.exceptions import DegenerateFold, StructuralError

logger = logging.getLogger(__name__)

_SECOND_DERIVATIVE_STEP = 1e-6
_PARAM_STEP = 1e-7
# Largest principal-parameter tangent component accepted at a fold
_FOLD_TANGENT_TOL = 0.1


def _with_param(payload, name: str, value: float):
    if isinstance(payload, AlgebraicPoint):
        return AlgebraicPoint(payload.x, {**payload.params, name: value})
    return payload.with_params(**{name: value})


class FoldDiscretization:
    """``z = [z_base, α2, φ]`` for a base discretization continued in α1."""

    def __init__(self, base: Discretization, alpha1: str, alpha2: str) -> None:
        if alpha2 in base.free:
            raise StructuralError(f"'{alpha2}' is already free in the base problem")
        self.base = base
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.principal = alpha2
        self.free = (*base.free, alpha2)
        self.n_base = base.size
        self._i1 = base.param_index(alpha1)
        self._y = np.delete(np.arange(self.n_base), self._i1)
        self.n_phi = self._y.size
        self.size = self.n_base + 1 + self.n_phi
        n_equations = 2 * (self.n_base - 1) + 1
        if n_equations != self.size - 1:
            raise StructuralError(f"fold system has {n_equations} equations for {self.size} unknowns")

    # -- layout ----------------------------------------------------------

    def split(self, z: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
        return z[: self.n_base], float(z[self.n_base]), z[self.n_base + 1 :]

    def embed(self, phi: np.ndarray) -> np.ndarray:
        full = np.zeros(self.n_base)
        full[self._y] = phi
        return full

    def param_index(self, name: str) -> int:
        if name == self.alpha2:
            return self.n_base
        return self.base.param_index(name)

    def pack(self, point) -> np.ndarray:
        payload, alpha2, phi = point
        return np.concatenate([self.base.pack(payload), [float(alpha2)], np.asarray(phi, dtype=float)])

    def unpack(self, z: np.ndarray):
        zb, a2, _ = self.split(z)
        return _with_param(self.base.unpack(zb), self.alpha2, a2)

    def weights(self) -> np.ndarray:
        wb = self.base.weights()
        return np.concatenate([wb, [1.0], wb[self._y]])

    def norm(self, z: np.ndarray) -> float:
        return self.base.norm(z[: self.n_base])

    def refresh(self, z: np.ndarray) -> FoldDiscretization:
        base = self.base.refresh(z[: self.n_base])
        if base is self.base:
            return self
        return FoldDiscretization(base, self.alpha1, self.alpha2)

    # -- equations ---------------------------------------------------------

    def _overrides(self, a2: float, overrides: Mapping[str, float] | None) -> dict[str, float]:
        values = dict(overrides or {})
        values[self.alpha2] = a2
        return values

    def residual(self, z: np.ndarray, overrides: Mapping[str, float] | None = None) -> np.ndarray:
        zb, a2, phi = self.split(z)
        ov = self._overrides(a2, overrides)
        g = self.base.residual(zb, ov)
        null = self.base.jacobian(zb, ov) @ self.embed(phi)
        norm = np.sum(self.base.weights()[self._y] * phi**2) - 1.0
        return np.concatenate([g, null, [norm]])

    def jacobian(self, z: np.ndarray, overrides: Mapping[str, float] | None = None) -> sparse.csc_matrix:
        zb, a2, phi = self.split(z)
        ov = self._overrides(a2, overrides)
        phi_hat = self.embed(phi)
        jac = sparse.csc_matrix(self.base.jacobian(zb, ov))

        step = _PARAM_STEP * (1.0 + abs(a2))
        shifted = self._overrides(a2 + step, overrides)
        g_a2 = (self.base.residual(zb, shifted) - self.base.residual(zb, ov)) / step
        null_a2 = (self.base.jacobian(zb, shifted) @ phi_hat - jac @ phi_hat) / step

        eps = _SECOND_DERIVATIVE_STEP
        second = (
            sparse.csc_matrix(self.base.jacobian(zb + eps * phi_hat, ov))
            - sparse.csc_matrix(self.base.jacobian(zb - eps * phi_hat, ov))
        ) / (2.0 * eps)

        weights_y = self.base.weights()[self._y]
        rows = self.n_base - 1
        blocks = [
            [jac, sparse.csc_matrix(g_a2[:, None]), sparse.csc_matrix((rows, self.n_phi))],
            [second, sparse.csc_matrix(null_a2[:, None]), jac[:, self._y]],
            [
                sparse.csc_matrix((1, self.n_base)),
                sparse.csc_matrix((1, 1)),
                sparse.csc_matrix(2.0 * weights_y * phi),
            ],
        ]
        return sparse.bmat(blocks, format="csc")


def fold_follow(
    event: BranchEvent,
    second: str,
    settings: ContinuationSettings | None = None,
    direction: float = 1,
) -> list[BranchEvent]:
    """Continue the fold *event* in its principal parameter and *second*."""
    if event.kind != FOLD:
        raise DegenerateFold(f"event {event.label} is a {event.kind}, not a fold")
    base = event.data["discretization"]
    z = event.data["z"]
    tangent = event.data["tangent"]
    alpha1 = principal_name(base)
    if second not in event.payload.params:
        raise StructuralError(f"'{second}' is not a parameter of the folded problem")
    disc = FoldDiscretization(base, alpha1, second)

    along_alpha1 = abs(float(tangent[base.param_index(alpha1)]))
    if along_alpha1 > _FOLD_TANGENT_TOL:
        raise DegenerateFold(f"tangent has component {along_alpha1:.3g} along {alpha1}; not at a fold")
    phi = tangent[disc._y]
    size = weighted_norm(phi, base.weights()[disc._y])
    if size < 1e-12:
        raise DegenerateFold("null vector at the fold is degenerate")
    phi = phi / size

    z0 = np.concatenate([z, [event.payload.params[second]], phi])
    logger.info("Following fold in (%s, %s) from %s=%.10g", alpha1, second, alpha1, z[base.param_index(alpha1)])
    return continue_branch(disc, z0, direction, settings)
