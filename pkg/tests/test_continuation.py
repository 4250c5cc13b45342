"""Tests for algebraic continuation, event detection and branch switching."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import sparse

from pointcycle.continuation import (
    AlgebraicPoint,
    AlgebraicProblem,
    ContinuationSettings,
    UserTarget,
    continue_branch,
    detect_branch_point,
    detect_fold,
    detect_hopf,
    equilibrium_problem,
    fold_follow,
    switch_branch,
    write_branch,
)
from pointcycle.continuation.events import (
    BRANCH_POINT,
    ENDPOINT,
    FOLD,
    HOPF,
    USER_POINT,
    events_of_kind,
    read_branch,
    special_events,
)
from pointcycle.exceptions import (
    ConfigurationError,
    DegenerateFold,
    NoBranchPoint,
    StructuralError,
)

from tests.conftest import LORENZ_R_HOPF


def _parabola() -> AlgebraicProblem:
    """x² - p = 0: a fold at the origin."""
    return AlgebraicProblem(
        name="parabola",
        n=1,
        func=lambda x, p: np.array([x[0] ** 2 - p["p"]]),
        free=("p",),
        params={"p": 1.0},
        jacobian=lambda x, p: np.array([[2.0 * x[0]]]),
    )


def _transcritical() -> AlgebraicProblem:
    """x(p - x) = 0: the branches x = 0 and x = p cross at the origin."""
    return AlgebraicProblem(
        name="transcritical",
        n=1,
        func=lambda x, p: np.array([x[0] * (p["p"] - x[0])]),
        free=("p",),
        params={"p": -1.0},
        jacobian=lambda x, p: np.array([[p["p"] - 2.0 * x[0]]]),
    )


def _cusp_family() -> AlgebraicProblem:
    """x² + b·x - a = 0 in a; its folds lie on a = -b²/4."""
    return AlgebraicProblem(
        name="cusp",
        n=1,
        func=lambda x, p: np.array([x[0] ** 2 + p["b"] * x[0] - p["a"]]),
        free=("a",),
        params={"a": 1.0, "b": 0.0},
        jacobian=lambda x, p: np.array([[2.0 * x[0] + p["b"]]]),
    )


def _lorenz_c_plus(r: float) -> np.ndarray:
    s = math.sqrt(8.0 / 3.0 * (r - 1.0))
    return np.array([s, s, r - 1.0])


class TestSettings:

    def test_step_order_enforced(self) -> None:
        with pytest.raises(ConfigurationError, match="step sizes"):
            ContinuationSettings(ds0=1.0, ds_max=0.1)

    def test_unknown_detection(self) -> None:
        with pytest.raises(ConfigurationError, match="unknown event kinds"):
            ContinuationSettings(detect=frozenset({"cusp"}))

    def test_empty_bound(self) -> None:
        with pytest.raises(ConfigurationError, match="lo < hi"):
            ContinuationSettings(bounds={"p": (1.0, 1.0)})

    def test_direction_from_sign(self) -> None:
        assert ContinuationSettings(ds0=-0.01).direction == -1
        assert ContinuationSettings().direction == 1


class TestAlgebraicProblem:

    def test_counting(self) -> None:
        with pytest.raises(StructuralError, match="free parameters"):
            _parabola().with_free(())

    def test_missing_value(self) -> None:
        with pytest.raises(StructuralError, match="without a value"):
            _parabola().with_free(("q",))

    def test_equilibrium_problem_unknown_parameter(self, lorenz) -> None:
        with pytest.raises(ConfigurationError, match="no parameter"):
            equilibrium_problem(lorenz, {"r": 21.0}, "kappa")


class TestFold:

    def test_test_function_is_parameter_component(self) -> None:
        tangent = np.array([0.6, -0.8])
        assert detect_fold(tangent, 1) == pytest.approx(-0.8)
        assert detect_fold(tangent, 0) == pytest.approx(0.6)

    def test_fold_located(self) -> None:
        settings = ContinuationSettings(ds0=0.1, ds_max=0.5, max_steps=60, bounds={"p": (-1.0, 2.0)})
        events = continue_branch(_parabola(), AlgebraicPoint([1.0], {"p": 1.0}), -1, settings)
        folds = events_of_kind(events, FOLD)
        assert len(folds) == 1
        assert folds[0].params["p"] == pytest.approx(0.0, abs=1e-6)
        assert folds[0].payload.x[0] == pytest.approx(0.0, abs=1e-3)

    def test_same_fold_from_either_side(self) -> None:
        # x² + x = a: x = 1 and x = -2 both sit at a = 2, on opposite sides of the fold at x = -1/2
        settings = ContinuationSettings(ds0=0.1, ds_max=0.5, max_steps=60, bounds={"a": (-1.0, 3.0)})
        located = []
        for x in (1.0, -2.0):
            events = continue_branch(_cusp_family(), AlgebraicPoint([x], {"a": 2.0, "b": 1.0}), -1, settings)
            folds = events_of_kind(events, FOLD)
            assert len(folds) == 1
            assert folds[0].payload.x[0] == pytest.approx(-0.5, abs=1e-3)
            located.append(folds[0].params["a"])
        assert located[0] == pytest.approx(-0.25, abs=1e-6)
        assert located[1] == pytest.approx(located[0], abs=1e-6)

    def test_bound_stops_on_far_side(self) -> None:
        settings = ContinuationSettings(ds0=0.1, ds_max=0.5, max_steps=60, bounds={"p": (-1.0, 2.0)})
        events = continue_branch(_parabola(), AlgebraicPoint([1.0], {"p": 1.0}), -1, settings)
        last = events[-1]
        assert last.kind == ENDPOINT
        assert last.params["p"] == pytest.approx(2.0, abs=1e-7)
        assert last.payload.x[0] == pytest.approx(-math.sqrt(2.0), abs=1e-6)

    def test_labels_are_sequential(self) -> None:
        settings = ContinuationSettings(ds0=0.1, ds_max=0.5, max_steps=60, bounds={"p": (-1.0, 2.0)})
        events = continue_branch(_parabola(), AlgebraicPoint([1.0], {"p": 1.0}), -1, settings)
        special = special_events(events)
        assert [e.kind for e in special] == [ENDPOINT, FOLD, ENDPOINT]
        assert [e.label for e in special] == [1, 2, 3]
        assert all(e.label is None for e in events if not e.is_special)

    def test_start_point_corrected(self) -> None:
        settings = ContinuationSettings(ds0=0.05, max_steps=3)
        events = continue_branch(_parabola(), AlgebraicPoint([1.01], {"p": 1.0}), 1, settings)
        first = events[0]
        assert first.payload.x[0] ** 2 == pytest.approx(first.params["p"], abs=1e-9)


class TestUserTargets:

    def test_stopping_target(self) -> None:
        settings = ContinuationSettings(ds0=0.1, ds_max=0.5, user_targets=(UserTarget("p", 0.25),))
        events = continue_branch(_parabola(), AlgebraicPoint([1.0], {"p": 1.0}), -1, settings)
        last = events[-1]
        assert last.kind == USER_POINT
        assert last.params["p"] == pytest.approx(0.25, abs=1e-8)
        assert last.payload.x[0] == pytest.approx(0.5, abs=1e-7)

    def test_non_stopping_target_seen_twice(self) -> None:
        settings = ContinuationSettings(
            ds0=0.1,
            ds_max=0.5,
            max_steps=60,
            user_targets=(UserTarget("p", 0.5, stop=False),),
            bounds={"p": (-1.0, 2.0)},
        )
        events = continue_branch(_parabola(), AlgebraicPoint([1.0], {"p": 1.0}), -1, settings)
        hits = events_of_kind(events, USER_POINT)
        assert len(hits) == 2
        assert sorted(np.sign(e.payload.x[0]) for e in hits) == [-1.0, 1.0]

    def test_negative_ds0_reverses(self) -> None:
        settings = ContinuationSettings(ds0=-0.1, ds_max=0.5, user_targets=(UserTarget("p", 0.25),))
        events = continue_branch(_parabola(), AlgebraicPoint([1.0], {"p": 1.0}), 1, settings)
        assert events[-1].kind == USER_POINT


class TestBranchPoints:

    def test_test_function_is_determinant_sign(self) -> None:
        assert detect_branch_point(sparse.csc_matrix(np.diag([2.0, -3.0]))) == -1
        assert detect_branch_point(sparse.csc_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))) == -1
        assert detect_branch_point(sparse.csc_matrix(np.eye(3))) == 1

    def _events(self):
        settings = ContinuationSettings(
            ds0=0.05, ds_max=0.2, max_steps=40, detect=frozenset({BRANCH_POINT}), bounds={"p": (-2.0, 1.0)}
        )
        return continue_branch(_transcritical(), AlgebraicPoint([0.0], {"p": -1.0}), 1, settings)

    def test_detected_at_crossing(self) -> None:
        points = events_of_kind(self._events(), BRANCH_POINT)
        assert len(points) == 1
        assert points[0].params["p"] == pytest.approx(0.0, abs=1e-8)

    def test_switch_to_secondary_branch(self) -> None:
        point = events_of_kind(self._events(), BRANCH_POINT)[0]
        switched = switch_branch(point, ContinuationSettings(ds0=0.01))
        x = switched.solution.x[0]
        assert x == pytest.approx(switched.solution.params["p"], abs=1e-10)
        assert abs(x) > 1e-3

    def test_secondary_branch_continues(self) -> None:
        point = events_of_kind(self._events(), BRANCH_POINT)[0]
        switched = switch_branch(point, ContinuationSettings(ds0=0.01))
        settings = ContinuationSettings(ds0=0.05, ds_max=0.2, max_steps=10, detect=frozenset())
        events = continue_branch(switched.discretization, switched.z, switched.tangent, settings)
        for e in events:
            assert e.payload.x[0] == pytest.approx(e.params["p"], abs=1e-8)

    def test_switch_needs_branch_point(self) -> None:
        settings = ContinuationSettings(ds0=0.1, ds_max=0.5, max_steps=60, bounds={"p": (-1.0, 2.0)})
        events = continue_branch(_parabola(), AlgebraicPoint([1.0], {"p": 1.0}), -1, settings)
        with pytest.raises(NoBranchPoint, match="not a branch point"):
            switch_branch(events_of_kind(events, FOLD)[0])


class TestHopf:

    def test_test_function_vanishes_on_imaginary_pair(self) -> None:
        jac = np.array([[0.0, -2.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
        assert detect_hopf(jac) == pytest.approx(0.0, abs=1e-12)

    def test_lorenz_hopf_of_c_plus(self, lorenz) -> None:
        problem = equilibrium_problem(lorenz, {"r": 21.0}, "r")
        settings = ContinuationSettings(
            ds0=0.5, ds_max=1.0, detect=frozenset({HOPF}), bounds={"r": (20.0, 30.0)}
        )
        events = continue_branch(problem, _lorenz_c_plus(21.0), 1, settings)
        hopf = events_of_kind(events, HOPF)
        assert len(hopf) == 1
        assert hopf[0].params["r"] == pytest.approx(LORENZ_R_HOPF, abs=1e-5)
        # ω² = b(σ + r) at the Hopf point
        omega = math.sqrt(8.0 / 3.0 * (10.0 + LORENZ_R_HOPF))
        assert hopf[0].data["omega"] == pytest.approx(omega, rel=1e-4)
        assert events[-1].kind == ENDPOINT
        assert events[-1].params["r"] == pytest.approx(30.0, abs=1e-6)

    def test_equilibria_stay_on_c_plus(self, lorenz) -> None:
        problem = equilibrium_problem(lorenz, {"r": 21.0}, "r")
        settings = ContinuationSettings(ds0=0.5, ds_max=1.0, max_steps=5, detect=frozenset())
        for e in continue_branch(problem, _lorenz_c_plus(21.0), 1, settings):
            np.testing.assert_allclose(e.payload.x, _lorenz_c_plus(e.params["r"]), atol=1e-8)


class TestBranchFiles:

    def test_written_table(self, tmp_path) -> None:
        settings = ContinuationSettings(ds0=0.1, ds_max=0.5, max_steps=60, bounds={"p": (-1.0, 2.0)})
        events = continue_branch(_parabola(), AlgebraicPoint([1.0], {"p": 1.0}), -1, settings)
        path = write_branch(events, tmp_path / "runs" / "parabola.tsv")
        frame = read_branch(path)
        assert list(frame.columns) == ["step", "kind", "p", "norm", "label"]
        assert len(frame) == len(events)
        assert [str(v) for v in frame["label"] if str(v)] == ["1", "2", "3"]
        assert list(frame["kind"])[0] == ENDPOINT
        assert float(frame["p"].iloc[-1]) == pytest.approx(2.0, abs=1e-7)


class TestFoldFollow:

    def _fold(self):
        settings = ContinuationSettings(ds0=0.1, ds_max=0.5, max_steps=60, bounds={"a": (-1.0, 2.0)})
        events = continue_branch(_cusp_family(), AlgebraicPoint([1.0], {"a": 1.0, "b": 0.0}), -1, settings)
        return events_of_kind(events, FOLD)[0]

    def test_curve_of_folds(self) -> None:
        settings = ContinuationSettings(ds0=0.05, ds_max=0.2, max_steps=20, detect=frozenset())
        events = fold_follow(self._fold(), "b", settings)
        assert len(events) > 5
        for e in events:
            b = e.params["b"]
            assert e.params["a"] == pytest.approx(-b * b / 4.0, abs=1e-7)
            assert e.payload.x[0] == pytest.approx(-b / 2.0, abs=1e-6)
        assert max(e.params["b"] for e in events) > 0.2

    def test_second_parameter_already_free(self) -> None:
        with pytest.raises(StructuralError, match="already free"):
            fold_follow(self._fold(), "a")

    def test_needs_fold_event(self) -> None:
        settings = ContinuationSettings(ds0=0.1, ds_max=0.5, user_targets=(UserTarget("a", 0.25),))
        events = continue_branch(_cusp_family(), AlgebraicPoint([1.0], {"a": 1.0, "b": 0.0}), -1, settings)
        with pytest.raises(DegenerateFold, match="not a fold"):
            fold_follow(events[-1], "b")
