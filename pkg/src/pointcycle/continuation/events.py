"""Branch events, continuation settings, test functions and branch files."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from pointcycle.bvp.collocation import determinant_sign
from pointcycle.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

REGULAR = "regular"
FOLD = "fold"
BRANCH_POINT = "branch_point"
HOPF = "hopf"
USER_POINT = "user_point"
ENDPOINT = "endpoint"

EVENT_KINDS: tuple[str, ...] = (REGULAR, FOLD, BRANCH_POINT, HOPF, USER_POINT, ENDPOINT)
DETECTABLE: frozenset[str] = frozenset({FOLD, BRANCH_POINT, HOPF})


@dataclass(frozen=True, slots=True)
class UserTarget:
    """Record the point where free parameter *name* equals *value*."""

    name: str
    value: float
    stop: bool = True


@dataclass(frozen=True, slots=True, eq=False)
class BranchEvent:
    kind: str
    step: int
    params: dict[str, float]
    norm: float
    payload: Any
    label: int | None = None
    # Internal data for restarts: z, tangent, discretization, omega, ...
    data: dict = field(default_factory=dict, repr=False)

    @property
    def is_special(self) -> bool:
        return self.kind != REGULAR


@dataclass(frozen=True, slots=True)
class ContinuationSettings:
    """Step control and event requests for one continuation run.

    A negative ``ds0`` runs the branch against the principal parameter.
    """

    ds0: float = 0.01
    ds_min: float = 1e-8
    ds_max: float = 0.1
    max_steps: int = 200
    detect: frozenset[str] = frozenset({FOLD})
    user_targets: tuple[UserTarget, ...] = ()
    bounds: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    tol: float = 1e-9
    max_iter: int = 10
    # Corrector iterations at or below which the step grows
    fast_iterations: int = 3
    growth: float = 1.3
    adapt_every: int = 0
    event_tol: float = 1e-8
    max_event_iter: int = 60

    def __post_init__(self) -> None:
        if not 0.0 < self.ds_min <= abs(self.ds0) <= self.ds_max:
            raise ConfigurationError(
                f"step sizes must satisfy 0 < ds_min <= |ds0| <= ds_max, got "
                f"ds_min={self.ds_min} ds0={self.ds0} ds_max={self.ds_max}"
            )
        if self.max_steps < 1:
            raise ConfigurationError(f"max_steps must be positive, got {self.max_steps}")
        unknown = set(self.detect) - DETECTABLE
        if unknown:
            raise ConfigurationError(f"unknown event kinds to detect: {sorted(unknown)}")
        object.__setattr__(self, "detect", frozenset(self.detect))
        object.__setattr__(self, "user_targets", tuple(self.user_targets))
        for name, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise ConfigurationError(f"bound for '{name}' must satisfy lo < hi, got ({lo}, {hi})")

    @property
    def direction(self) -> int:
        return -1 if self.ds0 < 0 else 1


# ------------------------------------------------------------------
# Test functions
# ------------------------------------------------------------------

def detect_fold(tangent: np.ndarray, index: int) -> float:
    """Principal-parameter component of the unit tangent."""
    return float(tangent[index])


def detect_branch_point(bordered) -> int:
    """Sign of det of the arclength-bordered Jacobian."""
    return determinant_sign(bordered)


def detect_hopf(jacobian: np.ndarray) -> float:
    """``σ1·σ2 - σ3`` of a 3×3 Jacobian; zero when a pair of eigenvalues sums to zero."""
    jac = np.asarray(jacobian, dtype=float)
    s1 = np.trace(jac)
    s2 = (
        jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
        + jac[0, 0] * jac[2, 2] - jac[0, 2] * jac[2, 0]
        + jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1]
    )
    s3 = np.linalg.det(jac)
    return float(s1 * s2 - s3)


def hopf_frequency(jacobian: np.ndarray, rtol: float = 1e-4) -> tuple[float, np.ndarray] | None:
    """``(ω, v)`` of the complex pair closest to the imaginary axis, or None for a neutral saddle."""
    eigvals, eigvecs = np.linalg.eig(np.asarray(jacobian, dtype=float))
    complex_idx = [i for i in range(len(eigvals)) if eigvals[i].imag > 0.0]
    if not complex_idx:
        return None
    i = min(complex_idx, key=lambda k: abs(eigvals[k].real))
    omega = float(eigvals[i].imag)
    if abs(eigvals[i].real) > rtol * max(1.0, abs(eigvals[i])):
        logger.warning("Hopf pair not on the imaginary axis: %s", eigvals[i])
    vec = eigvecs[:, i]
    return omega, vec / np.linalg.norm(vec)


# ------------------------------------------------------------------
# Queries and branch files
# ------------------------------------------------------------------

def special_events(events: Iterable[BranchEvent]) -> list[BranchEvent]:
    return [e for e in events if e.is_special]


def events_of_kind(events: Iterable[BranchEvent], kind: str) -> list[BranchEvent]:
    return [e for e in events if e.kind == kind]


def branch_frame(events: Sequence[BranchEvent], param_names: Sequence[str] | None = None) -> pd.DataFrame:
    if param_names is None:
        param_names = list(events[0].params) if events else []
    rows = []
    for e in events:
        row = {"step": e.step, "kind": e.kind}
        row.update({name: e.params.get(name, math.nan) for name in param_names})
        row["norm"] = e.norm
        row["label"] = "" if e.label is None else e.label
        rows.append(row)
    columns = ["step", "kind", *param_names, "norm", "label"]
    return pd.DataFrame(rows, columns=columns)


def write_branch(
    events: Sequence[BranchEvent], path: str | Path, param_names: Sequence[str] | None = None
) -> Path:
    """Tab-separated ``step kind β_1 … β_k norm label`` table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    branch_frame(events, param_names).to_csv(path, sep="\t", index=False, float_format="%.17g")
    logger.info("Branch with %d points written to %s", len(events), path)
    return path


def read_branch(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, sep="\t", keep_default_na=False)
