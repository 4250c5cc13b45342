"""Tests for cycles, the monodromy oracle and adjoint eigenfunctions."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from pointcycle.bvp.mesh import MeshedSolution, uniform_mesh
from pointcycle.exceptions import (
    ConfigurationError,
    DomainError,
    NoBranchPoint,
    OrthogonalityViolation,
    StructuralError,
)
from pointcycle.floquet import (
    PERIOD,
    STABLE,
    UNSTABLE,
    AdjointEigenfunction,
    CycleSolution,
    MonodromyReport,
    Pinning,
    adjoint_inverse_check,
    build_eigenfunction_homotopy,
    check_orthogonality,
    compute_eigenfunction,
    correct_cycle,
    is_saddle,
    monodromy,
    multiplier_eigenvector,
    product_law_residual,
    rephase,
    unscaled_eigen_bvp,
    write_report,
)
from pointcycle.models import eval_rhs

# a = 0.1, c = 0.05 on a cycle of period 2π
MU_VERTICAL = math.exp(-2.0 * math.pi * 0.05)
MU_RADIAL = math.exp(-4.0 * math.pi * 0.1)


class TestCycleSolution:

    def test_period_and_base_point(self, circle_solution) -> None:
        cycle = CycleSolution(circle_solution)
        assert cycle.T_plus == pytest.approx(2.0 * math.pi)
        np.testing.assert_allclose(cycle.base_point, [1.0, 0.0, 0.0], atol=1e-15)
        assert cycle.periodicity_error < 1e-14

    def test_needs_three_components(self) -> None:
        flat = MeshedSolution.constant([0.0, 0.0], uniform_mesh(4), 2, {PERIOD: 1.0})
        with pytest.raises(StructuralError, match="3 components"):
            CycleSolution(flat)

    def test_needs_positive_period(self, circle_solution) -> None:
        with pytest.raises(StructuralError, match="must be positive"):
            CycleSolution(circle_solution.with_params(**{PERIOD: -1.0}))


class TestCorrection:

    def test_integral_phase(self, circle_system, circle_solution) -> None:
        cycle = correct_cycle(circle_system, circle_solution, ("a",))
        assert cycle.T_plus == pytest.approx(2.0 * math.pi, rel=1e-5)
        radius = np.hypot(cycle.x_plus.values[:, 0], cycle.x_plus.values[:, 1])
        np.testing.assert_allclose(radius, 1.0, atol=1e-4)
        assert cycle.params["a"] == pytest.approx(0.1)

    def test_pinned_phase(self, circle_system, circle_solution) -> None:
        cycle = correct_cycle(circle_system, circle_solution, ("a",), Pinning(1, 0.0))
        assert cycle.base_point[1] == pytest.approx(0.0, abs=1e-8)
        assert cycle.base_point[0] == pytest.approx(1.0, abs=1e-4)

    def test_unknown_parameter(self, circle_system, circle_solution) -> None:
        with pytest.raises(ConfigurationError, match="no parameter"):
            correct_cycle(circle_system, circle_solution, ("b",))


class TestRephase:

    def test_downward_crossing(self, circle_solution) -> None:
        shifted = rephase(circle_solution, 0, 0.0, "down")
        assert shifted.metadata["rephased_at"] == pytest.approx(0.25, abs=1e-9)
        assert shifted.start[0] == 0.0
        assert shifted.start[1] == pytest.approx(1.0, abs=1e-6)
        assert shifted.mesh[0] == 0.0 and shifted.mesh[-1] == 1.0

    def test_upward_crossing(self, circle_solution) -> None:
        shifted = rephase(circle_solution, 0, 0.0, "up")
        assert shifted.metadata["rephased_at"] == pytest.approx(0.75, abs=1e-9)
        assert shifted.start[1] == pytest.approx(-1.0, abs=1e-6)

    def test_no_crossing(self, circle_solution) -> None:
        with pytest.raises(DomainError, match="never crosses"):
            rephase(circle_solution, 0, 2.0)

    def test_bad_direction(self, circle_solution) -> None:
        with pytest.raises(DomainError, match="'up' or 'down'"):
            rephase(circle_solution, 0, 0.0, "sideways")


class TestMonodromy:

    def test_multipliers(self, circle_system, circle_solution) -> None:
        report = monodromy(circle_system, circle_solution)
        assert report.trivial_error < 1e-3
        mu_u, mu_s = report.nontrivial()
        assert complex(mu_u).real == pytest.approx(MU_VERTICAL, rel=1e-8)
        assert complex(mu_s).real == pytest.approx(MU_RADIAL, rel=1e-3)

    def test_product_law(self, circle_system, circle_solution) -> None:
        report = monodromy(circle_system, circle_solution)
        assert product_law_residual(circle_system, circle_solution, report) < 1e-6

    def test_adjoint_is_inverse_transpose(self, circle_system, circle_solution) -> None:
        report = monodromy(circle_system, circle_solution)
        assert adjoint_inverse_check(report)
        np.testing.assert_allclose(report.N @ report.M.T, np.eye(3), atol=1e-7)

    def test_vertical_eigenvector(self, circle_system, circle_solution) -> None:
        report = monodromy(circle_system, circle_solution)
        vec = report.right_eigenvector(MU_VERTICAL)
        np.testing.assert_allclose(np.abs(vec), [0.0, 0.0, 1.0], atol=1e-8)

    def test_report_file(self, circle_system, circle_solution, tmp_path) -> None:
        report = monodromy(circle_system, circle_solution)
        path = write_report(report, tmp_path / "nested" / "monodromy.txt")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "# monodromy matrix M"
        assert lines[4] == "# adjoint monodromy matrix N"
        assert lines[8] == "# multipliers (real imag)"
        assert len(lines) == 12


class TestMultiplierEigenvector:

    MATRIX = np.array([[3.0, 1.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, -2.0]])

    def test_eigenpair_by_branch_switching(self) -> None:
        mu, vec = multiplier_eigenvector(self.MATRIX, 0.5)
        assert mu == pytest.approx(0.5, abs=1e-8)
        expected = np.array([-0.4, 1.0, 0.0]) / math.hypot(0.4, 1.0)
        np.testing.assert_allclose(vec, expected, atol=1e-6)

    def test_no_eigenvalue_near_target(self) -> None:
        with pytest.raises(NoBranchPoint, match="no real eigenvalue"):
            multiplier_eigenvector(self.MATRIX, 1.5)


class TestAdjointEigenfunction:

    def test_validation(self, circle_solution) -> None:
        w = circle_solution.component(0, 3)
        with pytest.raises(DomainError, match="s must be"):
            AdjointEigenfunction(w=w, lam=0.0, s=2, target=UNSTABLE)
        with pytest.raises(DomainError, match="target must be"):
            AdjointEigenfunction(w=w, lam=0.0, s=1, target="neutral")

    def test_multiplier_convention(self, circle_solution) -> None:
        eig = AdjointEigenfunction(w=circle_solution, lam=math.log(2.0), s=-1, target=STABLE)
        assert eig.multiplier == pytest.approx(-2.0)
        assert eig.adjoint_multiplier == pytest.approx(-0.5)

    def test_homotopy_problem_counts(self, circle_system, circle_solution) -> None:
        problem = build_eigenfunction_homotopy(circle_system, circle_solution)
        assert problem.n_d == 6
        assert problem.free == ("lam", "h", PERIOD)
        assert problem.n_fp == problem.n_bc + problem.n_ic - problem.n_d + 1

    def test_homotopy_rejects_bad_sign(self, circle_system, circle_solution) -> None:
        with pytest.raises(DomainError, match="s must be"):
            build_eigenfunction_homotopy(circle_system, circle_solution, s=0)

    def test_unscaled_zero_multiplier(self, circle_system, circle_solution) -> None:
        with pytest.raises(DomainError, match="nonzero"):
            unscaled_eigen_bvp(circle_system, circle_solution, 0.0)

    def test_unscaled_shifted_form(self, circle_system, circle_solution) -> None:
        problem = unscaled_eigen_bvp(circle_system, circle_solution, -0.5, shifted=True)
        assert problem.params["lam"] == pytest.approx(math.log(0.5))
        assert problem.labels["s"] == -1

    def test_vertical_eigenfunction(self, circle_system, circle_solution) -> None:
        eig = compute_eigenfunction(circle_system, circle_solution, UNSTABLE)
        assert eig.s == 1
        assert eig.lam == pytest.approx(math.log(MU_VERTICAL), abs=1e-6)
        np.testing.assert_allclose(eig.w.start, [0.0, 0.0, 1.0], atol=1e-6)
        np.testing.assert_allclose(eig.w.end, eig.w.start, atol=1e-8)
        assert eig.solution.params["h"] == pytest.approx(1.0, abs=1e-8)

    def test_lam_drift_is_rejected(self, circle_system, circle_solution) -> None:
        with pytest.raises(NoBranchPoint, match="drifted"):
            compute_eigenfunction(circle_system, circle_solution, UNSTABLE, drift_tol=-1.0)


class TestOrthogonality:
    """Base point (1, 0, 0): f = (0, 1, 0) and the radial eigenvector is (1, 0, 0)."""

    @staticmethod
    def _eig(circle_solution, w0) -> AdjointEigenfunction:
        w = MeshedSolution.constant(np.asarray(w0), circle_solution.mesh, circle_solution.degree)
        return AdjointEigenfunction(w=w, lam=math.log(MU_VERTICAL), s=1, target=UNSTABLE)

    @pytest.fixture()
    def report(self, circle_system, circle_solution) -> MonodromyReport:
        return monodromy(circle_system, circle_solution)

    def test_within_both_bounds(self, circle_system, circle_solution, report) -> None:
        eig = self._eig(circle_solution, [5e-6, 5e-7, 1.0])
        along_flow, along_eigvec = check_orthogonality(circle_system, circle_solution, eig, report)
        assert along_flow == pytest.approx(5e-7, rel=1e-3)
        assert along_eigvec == pytest.approx(5e-6, rel=1e-3)

    def test_flow_bound(self, circle_system, circle_solution, report) -> None:
        eig = self._eig(circle_solution, [0.0, 2e-6, 1.0])
        with pytest.raises(OrthogonalityViolation, match="<w0,f>=2.00e-06"):
            check_orthogonality(circle_system, circle_solution, eig, report)

    def test_eigenvector_bound(self, circle_system, circle_solution, report) -> None:
        eig = self._eig(circle_solution, [2e-5, 0.0, 1.0])
        with pytest.raises(OrthogonalityViolation, match="<w0,e>=2.00e-05"):
            check_orthogonality(circle_system, circle_solution, eig, report)

    def test_raw_flow_product(self, circle_system, circle_solution, report) -> None:
        # f = (-2.4, 3, 0) at (3, 0, 0), so <w0,f> = 1.5e-6 although w0 is within 1e-6 of the unit normal
        eig = self._eig(circle_solution, [0.0, 5e-7, 1.0])
        scaled = circle_solution.with_values(3.0 * circle_solution.values)
        with pytest.raises(OrthogonalityViolation, match="<w0,f>=1.50e-06"):
            check_orthogonality(circle_system, scaled, eig, report)


class TestSaddle:

    def test_attracting_cycle(self, circle_system, circle_solution) -> None:
        assert not is_saddle(monodromy(circle_system, circle_solution))

    def test_vertical_repulsion(self, circle_system, circle_solution) -> None:
        report = monodromy(circle_system, circle_solution, {"c": -0.05})
        mu_u, mu_s = report.nontrivial()
        assert complex(mu_u).real == pytest.approx(1.0 / MU_VERTICAL, rel=1e-8)
        assert complex(mu_s).real == pytest.approx(MU_RADIAL, rel=1e-3)
        assert is_saddle(report)

    def test_complex_pair(self) -> None:
        multipliers = np.array([2.0 + 1.0j, 2.0 - 1.0j, 1.0])
        report = MonodromyReport(M=np.eye(3), multipliers=multipliers, N=np.eye(3), eigenvectors=np.eye(3))
        assert not is_saddle(report)


class TestFoodChainCycle:
    """The saddle cycle at d1 = 0.25, d2 = 0.0125 lies past the fold of cycles near d1 = 0.208."""

    PERIOD_AT_TARGET = 24.282248
    BASE = np.array([0.839705, 0.125349, 10.55289])

    @pytest.fixture()
    def cycle(self, food_chain) -> CycleSolution:
        params = {"d1": 0.25, "d2": 0.0125}
        alpha = food_chain.param_vector(params)
        period = self.PERIOD_AT_TARGET
        orbit = solve_ivp(
            lambda t, x: eval_rhs(food_chain, x, alpha),
            (0.0, period),
            self.BASE,
            method="DOP853",
            rtol=1e-11,
            atol=1e-12,
            dense_output=True,
        )
        guess = MeshedSolution.from_function(
            lambda tau: orbit.sol(tau * period).T, uniform_mesh(80), 4, {**params, PERIOD: period}
        )
        return correct_cycle(food_chain, guess, free=("d1",), phase=Pinning(1, self.BASE[1]))

    def test_period(self, cycle) -> None:
        assert cycle.T_plus == pytest.approx(self.PERIOD_AT_TARGET, rel=1e-3)
        assert cycle.params["d1"] == pytest.approx(0.25, abs=1e-12)
        assert cycle.periodicity_error < 1e-7

    def test_saddle(self, food_chain, cycle) -> None:
        report = monodromy(food_chain, cycle)
        assert is_saddle(report)
        mu_u, _ = report.nontrivial()
        assert complex(mu_u).real == pytest.approx(610.0, rel=0.05)
