"""Tests for equilibrium eigendata, initial connections and the connection problems."""

from __future__ import annotations

import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.linalg import expm

from pointcycle.bvp.collocation import CollocationSystem
from pointcycle.bvp.mesh import MeshedSolution
from pointcycle.connect import (
    CASE_U1,
    CASE_U2,
    CIRCLE,
    COORDINATE,
    INTERNAL,
    PLANE,
    EquilibriumEigendata,
    build_homotopy1,
    build_homotopy2,
    build_primary,
    connection_state,
    initial_connection_u1,
    initial_connection_u2,
    initial_state,
    initial_time_u1,
    initial_time_u2,
    linear_matrix,
    nearest_to_base,
    plane_gap,
    projection_gap,
    projection_gaps,
    solve_equilibrium,
    split_tangents,
    state_solution,
    tangent_frame,
    tangent_pivot,
    toward_zero,
)
from pointcycle.continuation.events import REGULAR, USER_POINT, BranchEvent
from pointcycle.exceptions import (
    DegenerateEigenvector,
    DomainError,
    OrthogonalityViolation,
    StructuralError,
    WrongStability,
)
from pointcycle.floquet import UNSTABLE, AdjointEigenfunction, CycleSolution, Pinning

from tests.conftest import FOOD_CHAIN_XI, LORENZ_LAMBDA_U

FOOD_CHAIN_DEPARTURE = np.array([0.742445, 0.166163, 11.997732])


def _eigenfunction(mesh: np.ndarray, w: tuple[float, float, float] = (0.0, 0.0, 1.0)) -> AdjointEigenfunction:
    return AdjointEigenfunction(w=MeshedSolution.constant(w, mesh, 4), lam=0.5, s=1, target=UNSTABLE)


@pytest.fixture()
def lorenz_eq(lorenz) -> EquilibriumEigendata:
    return solve_equilibrium(lorenz, {"r": 21.0}, CASE_U1)


@pytest.fixture()
def food_chain_eq(food_chain) -> EquilibriumEigendata:
    return solve_equilibrium(food_chain, {"d1": 0.25, "d2": 0.0125}, CASE_U2, FOOD_CHAIN_XI)


@pytest.fixture()
def lorenz_state(lorenz, lorenz_eq, circle_solution):
    """Lorenz origin tail joined to the unit circle; w(0) is orthogonal to f(x+(0))."""
    return initial_state(lorenz, lorenz_eq, CycleSolution(circle_solution), _eigenfunction(circle_solution.mesh))


@pytest.fixture()
def food_chain_state(food_chain, food_chain_eq, circle_solution):
    return initial_state(
        food_chain, food_chain_eq, CycleSolution(circle_solution), _eigenfunction(circle_solution.mesh), 1e-3, 10.0
    )


class TestEquilibrium:

    def test_lorenz_origin(self, lorenz_eq) -> None:
        assert lorenz_eq.lambda_eq == pytest.approx(LORENZ_LAMBDA_U, rel=1e-10)
        np.testing.assert_allclose(lorenz_eq.xi, 0.0, atol=1e-12)
        expected = np.array([10.0, LORENZ_LAMBDA_U + 10.0, 0.0])
        np.testing.assert_allclose(lorenz_eq.v, expected / np.linalg.norm(expected), atol=1e-10)

    def test_food_chain(self, food_chain, food_chain_eq) -> None:
        assert food_chain_eq.xi[1] == pytest.approx(1.0 / 6.0, abs=1e-9)
        assert food_chain_eq.xi[0] == pytest.approx((2.0 + math.sqrt(6.0)) / 6.0, abs=1e-6)
        assert food_chain_eq.lambda_eq < 0.0
        assert np.linalg.norm(food_chain_eq.v) == pytest.approx(1.0)
        assert food_chain_eq.residual(food_chain, {"d1": 0.25, "d2": 0.0125}) < 1e-9

    def test_wrong_stability(self, lorenz) -> None:
        with pytest.raises(WrongStability, match="case u2 needs 2"):
            solve_equilibrium(lorenz, {"r": 21.0}, CASE_U2)

    def test_source_needs_strong(self, circuit) -> None:
        with pytest.raises(WrongStability, match="3 unstable directions"):
            solve_equilibrium(circuit, {}, CASE_U1)

    def test_strong_unstable_direction(self, circuit) -> None:
        eq = solve_equilibrium(circuit, {}, CASE_U1, strong=True)
        np.testing.assert_allclose(eq.xi, 0.0, atol=1e-12)
        assert eq.lambda_eq == pytest.approx(3.0885, abs=1e-3)
        others = np.linalg.eigvals(linear_matrix(circuit, eq, {}))
        others = others[np.abs(others - eq.lambda_eq) > 1e-6]
        assert np.all(others.real < eq.lambda_eq)

    def test_strong_keeps_saddle(self, lorenz, lorenz_eq) -> None:
        eq = solve_equilibrium(lorenz, {"r": 21.0}, CASE_U1, strong=True)
        assert eq.lambda_eq == pytest.approx(lorenz_eq.lambda_eq, rel=1e-12)

    def test_unknown_case(self, lorenz) -> None:
        with pytest.raises(DomainError, match="case must be"):
            solve_equilibrium(lorenz, {"r": 21.0}, "u3")

    def test_params_round_trip(self, lorenz_eq) -> None:
        restored = EquilibriumEigendata.from_params(lorenz_eq.params(), CASE_U1)
        np.testing.assert_array_equal(restored.v, lorenz_eq.v)
        assert restored.lambda_eq == lorenz_eq.lambda_eq

    def test_eta_normalized(self) -> None:
        eq = EquilibriumEigendata(np.zeros(3), np.array([1.0, 0.0, 0.0]), -1.0, CASE_U2, eta=[0.0, 3.0, 4.0])
        np.testing.assert_allclose(eq.eta, [0.0, 0.6, 0.8])


class TestTangents:

    def test_unit_second_axis(self) -> None:
        a, b = split_tangents([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(a, [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(b, [0.0, 0.0, -1.0])

    def test_food_chain_departure(self, food_chain_eq) -> None:
        a, b = split_tangents(food_chain_eq.v)
        assert a @ food_chain_eq.v == pytest.approx(0.0, abs=1e-12)
        assert b @ food_chain_eq.v == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(food_chain_eq.xi + 0.001 * a, FOOD_CHAIN_DEPARTURE, atol=1e-5)

    def test_vanishing_pivot(self) -> None:
        with pytest.raises(DegenerateEigenvector):
            tangent_pivot(np.array([1.0, 0.0, 0.0]), fallback=False)
        assert tangent_pivot(np.array([1.0, 0.0, 0.0])) == 0
        a, b = split_tangents([1.0, 0.0, 0.0])
        assert a[0] == 0.0 and b[0] == 0.0
        assert np.linalg.norm(np.cross(a, b)) == pytest.approx(1.0)

    def test_frame_is_orthonormal(self, food_chain_eq) -> None:
        e1, e2 = tangent_frame(food_chain_eq.v)
        assert e1 @ e2 == pytest.approx(0.0, abs=1e-14)
        assert np.linalg.norm(e2) == pytest.approx(1.0)
        assert e2 @ food_chain_eq.v == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(e1, split_tangents(food_chain_eq.v)[0])


class TestInitialConnection:

    def test_time_u1(self, lorenz_eq) -> None:
        assert initial_time_u1(lorenz_eq, 1e-4) == pytest.approx(math.log(1e4) / LORENZ_LAMBDA_U)
        assert initial_time_u1(lorenz_eq, -1e-4) == initial_time_u1(lorenz_eq, 1e-4)

    def test_time_u1_rejects_large_eps(self, lorenz_eq) -> None:
        with pytest.raises(DomainError, match="must lie in"):
            initial_time_u1(lorenz_eq, 1.0)

    def test_time_u1_needs_case_u1(self, food_chain_eq) -> None:
        with pytest.raises(DomainError, match="case u1"):
            initial_time_u1(food_chain_eq, 1e-4)

    def test_u1_tail_reaches_unit_distance(self, lorenz_eq, circle_solution) -> None:
        T = initial_time_u1(lorenz_eq, 1e-4)
        u = initial_connection_u1(lorenz_eq, 1e-4, T, circle_solution.mesh, 4)
        assert np.linalg.norm(u.end - lorenz_eq.xi) == pytest.approx(1.0, rel=1e-12)
        np.testing.assert_allclose(u.start, lorenz_eq.xi + 1e-4 * lorenz_eq.v)
        assert u.params == {"T": T, "eps": 1e-4}

    def test_u1_needs_positive_time(self, lorenz_eq, circle_solution) -> None:
        with pytest.raises(DomainError, match="positive"):
            initial_connection_u1(lorenz_eq, 1e-4, 0.0, circle_solution.mesh, 4)

    def test_u2_tail_reaches_unit_distance(self, food_chain, food_chain_eq, circle_solution) -> None:
        state = initial_state(
            food_chain, food_chain_eq, CycleSolution(circle_solution), _eigenfunction(circle_solution.mesh), 1e-3
        )
        v1, _ = split_tangents(food_chain_eq.v)
        assert state.T == pytest.approx(initial_time_u2(food_chain, {}, food_chain_eq, v1, 1e-3))
        np.testing.assert_allclose(state.u.start, food_chain_eq.xi + 1e-3 * v1)
        assert np.linalg.norm(state.u.end - food_chain_eq.xi) == pytest.approx(1.0, rel=1e-6)

    def test_u2_tail_matches_matrix_exponential(self, food_chain, food_chain_eq, circle_solution) -> None:
        v1, _ = split_tangents(food_chain_eq.v)
        T = 40.0
        u = initial_connection_u2(food_chain, {}, food_chain_eq, v1, 1e-3, T, circle_solution.mesh, 4)
        expected = food_chain_eq.xi + 1e-3 * expm(T * linear_matrix(food_chain, food_chain_eq, {})) @ v1
        np.testing.assert_allclose(u.end, expected, rtol=1e-6)
        assert u.params == {"T": T, "eps": 1e-3}

    def test_u2_needs_positive_time(self, food_chain, food_chain_eq, circle_solution) -> None:
        v1, _ = split_tangents(food_chain_eq.v)
        with pytest.raises(DomainError, match="positive"):
            initial_connection_u2(food_chain, {}, food_chain_eq, v1, 1e-3, -1.0, circle_solution.mesh, 4)


class TestConnectionState:

    def test_initial_state(self, lorenz_state, lorenz_eq) -> None:
        assert lorenz_state.case == CASE_U1
        assert lorenz_state.T == pytest.approx(initial_time_u1(lorenz_eq, 1e-4))
        assert (lorenz_state.c1, lorenz_state.c2) == (1.0, 0.0)
        assert lorenz_state.endpoint_gap() == pytest.approx(np.linalg.norm(lorenz_state.u.end - [1.0, 0.0, 0.0]))

    def test_composite_solution(self, lorenz_state) -> None:
        solution = state_solution(lorenz_state)
        assert solution.n_d == 9
        for name in (*INTERNAL, "s", "n_u", "T", "eps"):
            assert name in solution.params
        assert solution.params["n_u"] == 1.0

    def test_split_back(self, lorenz, lorenz_state) -> None:
        restored = connection_state(lorenz, state_solution(lorenz_state))
        assert restored.case == CASE_U1
        assert restored.T == lorenz_state.T
        np.testing.assert_allclose(restored.u.values, lorenz_state.u.values, rtol=0.0, atol=1e-12)
        assert restored.eig.lam == 0.5

    def test_split_needs_nine_components(self, lorenz, circle_solution) -> None:
        with pytest.raises(StructuralError, match="9 components"):
            connection_state(lorenz, circle_solution)

    def test_split_needs_parameters(self, lorenz, lorenz_state) -> None:
        solution = state_solution(lorenz_state)
        bare = replace(solution, params={"T": 1.0})
        with pytest.raises(StructuralError, match="lacks parameters"):
            connection_state(lorenz, bare)

    def test_gaps_agree(self, lorenz, lorenz_state) -> None:
        projection, plane = projection_gaps(lorenz, state_solution(lorenz_state))
        assert projection == pytest.approx(projection_gap(lorenz_state))
        # f(1, 0, 0) = (-10, 21, 0) at r = 21; plane_gap is measured along the unit normal
        assert plane == pytest.approx(plane_gap(lorenz, lorenz_state) * math.sqrt(541.0))


class TestProblems:

    PHASE = Pinning(0, 1.0)

    def test_homotopy1_u1(self, lorenz, lorenz_state) -> None:
        problem = build_homotopy1(lorenz, lorenz_state, self.PHASE)
        assert problem.n_bc == 19
        assert problem.free == ("T", "h1", *INTERNAL)
        assert problem.params["h1"] == pytest.approx(plane_gap(lorenz, lorenz_state))

    def test_homotopy1_u2(self, food_chain, food_chain_state) -> None:
        problem = build_homotopy1(food_chain, food_chain_state, self.PHASE, active=("h1", "c1", "c2"))
        assert problem.n_bc == 20
        assert problem.free[:3] == ("h1", "c1", "c2")
        assert problem.n_fp == 12

    def test_homotopy1_active_length(self, lorenz, lorenz_state) -> None:
        with pytest.raises(StructuralError, match="needs 2 active parameters"):
            build_homotopy1(lorenz, lorenz_state, self.PHASE, active=("T",))

    def test_homotopy2_u1(self, lorenz, lorenz_state) -> None:
        problem = build_homotopy2(lorenz, lorenz_state, "r")
        assert problem.free[:2] == ("h2", "r")
        assert problem.params["h2"] == pytest.approx(projection_gap(lorenz_state))
        assert problem.n_fp == problem.n_bc - problem.n_d + 1

    def test_homotopy2_u1_needs_parameter(self, lorenz, lorenz_state) -> None:
        with pytest.raises(StructuralError, match="needs a system parameter"):
            build_homotopy2(lorenz, lorenz_state)

    def test_homotopy2_u2(self, food_chain, food_chain_state) -> None:
        problem = build_homotopy2(food_chain, food_chain_state)
        assert problem.free[:3] == ("h2", "c1", "c2")
        assert problem.n_bc == 20

    def test_primary_u1(self, lorenz, lorenz_state) -> None:
        problem = build_primary(lorenz, lorenz_state, ("T", "r"))
        assert problem.n_bc == 19
        assert problem.labels["variant"] == "point"
        assert problem.params["h1"] == problem.params["h2"] == 0.0

    @pytest.mark.parametrize(
        ("variant", "active", "n_bc"),
        [(PLANE, ("d1",), 18), (COORDINATE, ("d1",), 18), (CIRCLE, ("d1",), 20)],
    )
    def test_primary_u2_variants(self, food_chain, food_chain_state, variant, active, n_bc) -> None:
        problem = build_primary(food_chain, food_chain_state, active, variant, check=False)
        assert problem.n_bc == n_bc
        assert problem.labels["variant"] == variant

    def test_primary_alignment_gap(self, food_chain, food_chain_state) -> None:
        problem = build_primary(food_chain, food_chain_state, ("g", "eps"), CIRCLE, align=1, check=False)
        assert problem.n_bc == 21
        expected = food_chain_state.u.start[1] - food_chain_state.eq.xi[1]
        assert problem.params["g"] == pytest.approx(expected)

    def test_alignment_needs_circle(self, lorenz, lorenz_state) -> None:
        with pytest.raises(StructuralError, match="alignment gap"):
            build_primary(lorenz, lorenz_state, ("T", "r"), align=1)

    def test_unknown_variant(self, lorenz, lorenz_state) -> None:
        with pytest.raises(StructuralError, match="unknown departure variant"):
            build_primary(lorenz, lorenz_state, ("T", "r"), "sphere")

    def test_unknown_free_parameter(self, lorenz, lorenz_state) -> None:
        with pytest.raises(StructuralError, match="neither a system nor a connection parameter"):
            build_primary(lorenz, lorenz_state, ("T", "kappa"))

    def test_orthogonality_enforced(self, lorenz, lorenz_eq, circle_solution) -> None:
        eig = _eigenfunction(circle_solution.mesh, (1.0, 0.0, 0.0))
        state = initial_state(lorenz, lorenz_eq, CycleSolution(circle_solution), eig)
        with pytest.raises(OrthogonalityViolation):
            build_primary(lorenz, state, ("T", "r"))
        build_primary(lorenz, state, ("T", "r"), check=False)

    def test_reserved_name_clash(self, circle_system, lorenz_state) -> None:
        clashing = replace(circle_system, param_names=("a", "eps"))
        with pytest.raises(StructuralError, match="clash"):
            build_homotopy1(clashing, lorenz_state, self.PHASE)

    def test_homotopy1_start_solves_plane_row(self, lorenz, lorenz_state) -> None:
        problem = build_homotopy1(lorenz, lorenz_state, self.PHASE)
        solution = state_solution(lorenz_state, problem)
        bc = problem.bc(solution.start, solution.end, problem.params)
        assert bc[-1] == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize(("delta", "passes"), [(5e-6, True), (2e-5, False)])
    def test_orthogonality_bound(self, lorenz, lorenz_eq, circle_solution, delta, passes) -> None:
        # f(1, 0, 0) = (-10, 21, 0), so <w(0), f> = delta without normalization
        eig = _eigenfunction(circle_solution.mesh, (0.0, delta / 21.0, 1.0))
        state = initial_state(lorenz, lorenz_eq, CycleSolution(circle_solution), eig)
        if passes:
            build_primary(lorenz, state, ("T", "r"))
        else:
            with pytest.raises(OrthogonalityViolation, match="2.00e-05"):
                build_primary(lorenz, state, ("T", "r"))

    @pytest.mark.parametrize("kind", ["homotopy1", "primary"])
    def test_jacobian_matches_finite_differences(self, lorenz, lorenz_state, kind) -> None:
        if kind == "homotopy1":
            problem = build_homotopy1(lorenz, lorenz_state, self.PHASE)
        else:
            problem = build_primary(lorenz, lorenz_state, ("T", "r"))
        solution = state_solution(lorenz_state, problem)
        system = CollocationSystem(problem, solution.mesh, solution.degree)
        z = system.pack(solution)
        jac = system.jacobian(z).toarray()
        step = 1e-6
        for col in range(system.size):
            dz = np.zeros(system.size)
            dz[col] = step
            numeric = (system.residual(z + dz) - system.residual(z - dz)) / (2.0 * step)
            np.testing.assert_allclose(jac[:, col], numeric, rtol=1e-4, atol=1e-5, err_msg=f"column {col}")


class TestBranchHelpers:

    @staticmethod
    def _event(kind: str, end: list[float]) -> BranchEvent:
        payload = SimpleNamespace(start=np.array([1.0, 0.0, 0.0, 0, 0, 0, 0, 0, 0]), end=np.array([0, 0, 0, 0, 0, 0, *end]))
        return BranchEvent(kind=kind, step=1, params={"T": 1.0}, norm=0.0, payload=payload)

    def test_nearest_user_point(self) -> None:
        far = self._event(USER_POINT, [1.5, 0.0, 0.0])
        near = self._event(USER_POINT, [1.1, 0.0, 0.0])
        closest = self._event(REGULAR, [1.0, 0.0, 0.0])
        assert nearest_to_base([far, closest, near]) is near

    def test_no_user_points(self) -> None:
        with pytest.raises(DomainError, match="no user points"):
            nearest_to_base([self._event(REGULAR, [1.0, 0.0, 0.0])])

    def test_toward_zero(self) -> None:
        assert toward_zero(0.3) == -1
        assert toward_zero(-0.2) == 1
