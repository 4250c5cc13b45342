"""Pseudo-arclength continuation, event location and branch switching."""

from __future__ import annotations

import logging
from collections.abc import Callable
from typing import Any, NamedTuple

import numpy as np
from scipy import sparse

from pointcycle.bvp.collocation import bordered_newton, factorize, pinning_row, solve
from pointcycle.continuation.discretization import Discretization, discretize
from pointcycle.continuation.events import (
    BRANCH_POINT,
    ENDPOINT,
    FOLD,
    HOPF,
    REGULAR,
    USER_POINT,
    BranchEvent,
    ContinuationSettings,
    detect_branch_point,
    detect_fold,
)
from pointcycle.exceptions import DomainError, NewtonDiverged, NoBranchPoint, SingularJacobian

logger = logging.getLogger(__name__)

# Relative size of ||A·phi|| accepted for a null direction at a branch point
_NULL_TOL = 1e-5
_INVERSE_PASSES = 3


def principal_name(disc: Discretization) -> str:
    return getattr(disc, "principal", disc.free[0])


def weighted_norm(vector: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sqrt(np.sum(weights * vector**2)))


def _bordered(disc: Discretization, z: np.ndarray, row: np.ndarray) -> sparse.csc_matrix:
    return sparse.vstack([disc.jacobian(z), sparse.csr_matrix(row[None, :])], format="csc")


def tangent_at(disc: Discretization, z: np.ndarray, previous: np.ndarray) -> np.ndarray:
    """Unit tangent at *z*, oriented along *previous*."""
    weights = disc.weights()
    rhs = np.zeros(disc.size)
    rhs[-1] = 1.0
    t = solve(_bordered(disc, z, weights * previous), rhs)
    return t / weighted_norm(t, weights)


def initial_tangent(disc: Discretization, z: np.ndarray, direction: float | np.ndarray) -> np.ndarray:
    if np.ndim(direction) == 0:
        seed = np.zeros(disc.size)
        seed[disc.param_index(principal_name(disc))] = 1.0 if direction >= 0 else -1.0
    else:
        seed = np.asarray(direction, dtype=float)
        if seed.size != disc.size:
            raise DomainError(f"direction has {seed.size} entries, discretization {disc.size}")
    return tangent_at(disc, z, seed)


def _correct(
    disc: Discretization,
    z: np.ndarray,
    t: np.ndarray,
    s: float,
    settings: ContinuationSettings,
    guess: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    row = disc.weights() * t
    start = z + s * t if guess is None else guess
    z_new, iterations, _ = bordered_newton(
        disc, start, row, row @ z + s, tol=settings.tol, max_iter=settings.max_iter
    )
    return z_new, iterations


# ------------------------------------------------------------------
# Test-function bookkeeping
# ------------------------------------------------------------------

class _Test(NamedTuple):
    kind: str
    stop: bool
    sign_only: bool
    evaluate: Callable[[Discretization, np.ndarray, np.ndarray], float]
    data: dict


class _Monitor:
    """The test functions requested for one run."""

    def __init__(self, disc: Discretization, settings: ContinuationSettings) -> None:
        self.tests: dict[str, _Test] = {}
        principal = principal_name(disc)
        if FOLD in settings.detect:
            self.tests["fold"] = _Test(
                FOLD, False, False, lambda d, z, t: detect_fold(t, d.param_index(principal)), {}
            )
        if BRANCH_POINT in settings.detect:
            self.tests["branch_point"] = _Test(
                BRANCH_POINT,
                False,
                True,
                lambda d, z, t: float(detect_branch_point(_bordered(d, z, d.weights() * t))),
                {},
            )
        if HOPF in settings.detect:
            if hasattr(disc, "hopf_test"):
                self.tests["hopf"] = _Test(HOPF, False, False, lambda d, z, t: d.hopf_test(z), {})
            else:
                logger.warning("Hopf detection requested on a branch without an equilibrium Jacobian")
        for i, target in enumerate(settings.user_targets):
            if target.name not in disc.free:
                logger.warning("User target '%s' is not a free parameter; ignored", target.name)
                continue
            self.tests[f"user{i}"] = _Test(
                USER_POINT,
                target.stop,
                False,
                self._param_test(target.name, target.value),
                {"target": target.name, "value": target.value},
            )
        for name, (lo, hi) in settings.bounds.items():
            if name not in disc.free:
                continue
            for edge, value in (("lo", lo), ("hi", hi)):
                self.tests[f"bound:{name}:{edge}"] = _Test(
                    ENDPOINT, True, False, self._param_test(name, value), {"bound": name, "value": value}
                )

    @staticmethod
    def _param_test(name: str, value: float):
        return lambda d, z, t: float(z[d.param_index(name)] - value)

    def values(self, disc: Discretization, z: np.ndarray, t: np.ndarray) -> dict[str, float]:
        return {key: test.evaluate(disc, z, t) for key, test in self.tests.items()}


def _crossed(before: float, after: float) -> bool:
    return before != 0.0 and np.sign(before) != np.sign(after)


def _locate(
    disc: Discretization,
    z: np.ndarray,
    t: np.ndarray,
    ds: float,
    test: _Test,
    f0: float,
    f1: float,
    end: tuple[np.ndarray, np.ndarray],
    settings: ContinuationSettings,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Zero of a test function on the arclength interval (0, ds].

    Regula falsi (Illinois) for continuous tests, bisection for sign tests.
    """
    a, fa = 0.0, f0
    b, fb = ds, f1
    best = (ds, end[0], end[1])
    ftol = 1e-2 * settings.event_tol * (1.0 + max(abs(f0), abs(f1)) if test.kind == HOPF else 1.0)
    stol = 1e-13 * max(1.0, ds)
    side = 0
    for _ in range(settings.max_event_iter):
        if test.sign_only or fb == fa:
            s = 0.5 * (a + b)
        else:
            s = b - fb * (b - a) / (fb - fa)
            if not a < s < b:
                s = 0.5 * (a + b)
        guess = z + (s / ds) * (end[0] - z)
        try:
            zs, _ = _correct(disc, z, t, s, settings, guess=guess)
            ts = tangent_at(disc, zs, t)
        except NewtonDiverged as exc:
            logger.warning("Event location stopped early: %s", exc)
            break
        fs = test.evaluate(disc, zs, ts)
        best = (s, zs, ts)
        if fs == 0.0 or (not test.sign_only and abs(fs) <= ftol):
            break
        if np.sign(fs) == np.sign(fa):
            a, fa = s, fs
            if side == 1:
                fb *= 0.5
            side = 1
        else:
            b, fb = s, fs
            if side == -1:
                fa *= 0.5
            side = -1
        if b - a <= stol:
            break
    return best


# ------------------------------------------------------------------
# Branch runs
# ------------------------------------------------------------------

def _make_event(
    kind: str, step: int, disc: Discretization, z: np.ndarray, t: np.ndarray, extra: dict | None = None
) -> BranchEvent:
    data = {"z": z.copy(), "tangent": t.copy(), "discretization": disc}
    if extra:
        data.update(extra)
    return BranchEvent(
        kind=kind,
        step=step,
        params={name: float(z[disc.param_index(name)]) for name in disc.free},
        norm=disc.norm(z),
        payload=disc.unpack(z),
        data=data,
    )


class _StepUnderflow(Exception):
    pass


def _advance(
    disc: Discretization, z: np.ndarray, t: np.ndarray, ds: float, settings: ContinuationSettings
) -> tuple[np.ndarray, np.ndarray, int, float]:
    """Predictor-corrector step, halving ds until the corrector converges."""
    while True:
        try:
            z_new, iterations = _correct(disc, z, t, ds, settings)
            t_new = tangent_at(disc, z_new, t)
            return z_new, t_new, iterations, ds
        except NewtonDiverged as exc:
            ds *= 0.5
            if ds < settings.ds_min:
                raise _StepUnderflow(str(exc)) from exc
            logger.warning("Corrector failed (%s); step halved to %.3g", exc, ds)


def _ensure_solution(disc: Discretization, z: np.ndarray, settings: ContinuationSettings) -> np.ndarray:
    norm = float(np.max(np.abs(disc.residual(z))))
    if norm <= settings.tol:
        return z
    row, index = pinning_row(disc, principal_name(disc))
    try:
        z, _, _ = bordered_newton(disc, z, row, z[index], tol=settings.tol, max_iter=settings.max_iter)
    except NewtonDiverged as exc:
        raise DomainError(f"start point does not solve the problem (residual {norm:.3e})") from exc
    logger.warning("Start point corrected from residual %.3e", norm)
    return z


def _adapt(
    disc: Discretization, z: np.ndarray, t: np.ndarray, settings: ContinuationSettings
) -> tuple[Discretization, np.ndarray, np.ndarray]:
    new_disc, z_new, move = disc.adapt(z)
    row, index = pinning_row(new_disc, principal_name(new_disc))
    try:
        z_new, _, _ = bordered_newton(
            new_disc, z_new, row, z_new[index], tol=settings.tol, max_iter=settings.max_iter
        )
        t_new = tangent_at(new_disc, z_new, move(t))
    except NewtonDiverged as exc:
        logger.warning("Mesh adaptation rejected: %s", exc)
        return disc, z, t
    logger.debug("Mesh adapted")
    return new_disc, z_new, t_new


def _label(events: list[BranchEvent]) -> list[BranchEvent]:
    labelled = []
    label = 0
    for e in events:
        if e.is_special:
            label += 1
            e = BranchEvent(e.kind, e.step, e.params, e.norm, e.payload, label, e.data)
        labelled.append(e)
    return labelled


def run_branch(
    disc: Discretization,
    z: np.ndarray,
    direction: float | np.ndarray,
    settings: ContinuationSettings,
) -> list[BranchEvent]:
    """Continue from the solved point *z* of *disc*."""
    t = initial_tangent(disc, z, direction)
    monitor = _Monitor(disc, settings)
    values = monitor.values(disc, z, t)
    events = [_make_event(ENDPOINT, 0, disc, z, t)]
    ds = abs(settings.ds0)
    stopped = False
    step = 0
    while step < settings.max_steps:
        try:
            z_new, t_new, iterations, ds = _advance(disc, z, t, ds, settings)
        except _StepUnderflow as exc:
            logger.warning("Branch truncated after %d steps: step below ds_min (%s)", step, exc)
            break
        step += 1
        new_values = monitor.values(disc, z_new, t_new)

        found = []
        for key, test in monitor.tests.items():
            if not _crossed(values[key], new_values[key]):
                continue
            s, ze, te = _locate(disc, z, t, ds, test, values[key], new_values[key], (z_new, t_new), settings)
            extra = dict(test.data)
            if test.kind == HOPF:
                hopf = disc.hopf_data(ze)
                if hopf is None:
                    logger.debug("Neutral saddle at step %d, not a Hopf point", step)
                    continue
                extra["omega"], extra["eigenvector"] = hopf
            found.append((s, test, ze, te, extra))
        found.sort(key=lambda item: item[0])

        for s, test, ze, te, extra in found:
            event = _make_event(test.kind, step, disc, ze, te, extra)
            events.append(event)
            logger.info("%s at step %d: %s", test.kind, step, _format_params(event.params))
            if test.stop:
                stopped = True
                break
        if stopped:
            break

        events.append(_make_event(REGULAR, step, disc, z_new, t_new))
        z, t, values = z_new, t_new, new_values
        disc = disc.refresh(z)
        if iterations <= settings.fast_iterations and ds < settings.ds_max:
            ds = min(ds * settings.growth, settings.ds_max)
            logger.debug("Step grown to %.3g", ds)
        if settings.adapt_every and step % settings.adapt_every == 0 and hasattr(disc, "adapt"):
            disc, z, t = _adapt(disc, z, t, settings)
            values = monitor.values(disc, z, t)

    if not stopped and events[-1].kind == REGULAR:
        last = events.pop()
        events.append(_make_event(ENDPOINT, last.step, last.data["discretization"], last.data["z"], last.data["tangent"]))
    return _label(events)


def continue_branch(
    problem: Any,
    start: Any,
    direction: float | np.ndarray = 1,
    settings: ContinuationSettings | None = None,
) -> list[BranchEvent]:
    """Continue a solution family from *start*.

    *direction* is a sign along the principal (first free) parameter or an
    explicit tangent such as the one returned by :func:`switch_branch`.
    """
    settings = settings or ContinuationSettings()
    disc, z = discretize(problem, start)
    z = _ensure_solution(disc, z, settings)
    direction = settings.direction * (np.asarray(direction, dtype=float) if np.ndim(direction) else direction)
    events = run_branch(disc, z, direction, settings)
    logger.info(
        "Branch of %d points, special: %s",
        len(events),
        ", ".join(f"{e.label}:{e.kind}" for e in events if e.is_special),
    )
    return events


def _format_params(params: dict[str, float]) -> str:
    return ", ".join(f"{k}={v:.8g}" for k, v in params.items())


# ------------------------------------------------------------------
# Branch switching
# ------------------------------------------------------------------

class SwitchedBranch(NamedTuple):
    solution: Any
    tangent: np.ndarray
    discretization: Discretization
    z: np.ndarray


def null_direction(disc: Discretization, z: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Second null direction at a branch point, W-orthogonal to the branch tangent."""
    weights = disc.weights()
    matrix = _bordered(disc, z, weights * t)
    phi = np.random.default_rng(0).standard_normal(disc.size)
    try:
        lu = factorize(matrix)
        for _ in range(_INVERSE_PASSES):
            phi = lu.solve(phi)
            phi /= np.linalg.norm(phi)
        if not np.all(np.isfinite(phi)):
            raise SingularJacobian("non-finite inverse iterate")
    except SingularJacobian:
        _, _, vh = np.linalg.svd(matrix.toarray())
        phi = vh[-1]
    scale = float(np.max(np.abs(matrix.data))) if matrix.nnz else 1.0
    residual = float(np.max(np.abs(matrix @ phi))) / scale
    if residual > _NULL_TOL:
        raise NoBranchPoint(f"no second null direction (relative residual {residual:.2e})")
    if phi[np.argmax(np.abs(phi))] < 0.0:
        phi = -phi
    return phi / weighted_norm(phi, weights)


def switch_branch(event: BranchEvent, settings: ContinuationSettings | None = None) -> SwitchedBranch:
    """First point on the secondary family through a branch point."""
    if event.kind != BRANCH_POINT:
        raise NoBranchPoint(f"event {event.label} is a {event.kind}, not a branch point")
    settings = settings or ContinuationSettings()
    disc = event.data["discretization"]
    z_bp = event.data["z"]
    phi = null_direction(disc, z_bp, event.data["tangent"])
    ds = abs(settings.ds0)
    while True:
        try:
            z_new, _ = _correct(disc, z_bp, phi, ds, settings)
            t_new = tangent_at(disc, z_new, phi)
            break
        except NewtonDiverged as exc:
            ds *= 0.5
            if ds < settings.ds_min:
                raise NoBranchPoint(f"corrector failed on the secondary branch: {exc}") from exc
    logger.info("Switched branch at label %s: %s", event.label, _format_params(event.params))
    return SwitchedBranch(disc.unpack(z_new), t_new, disc, z_new)
