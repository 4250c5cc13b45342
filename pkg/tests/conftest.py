"""Shared fixtures for the pointcycle test suite."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from pointcycle.bvp.mesh import MeshedSolution, uniform_mesh
from pointcycle.config import Settings
from pointcycle.models import SystemDefinition, builtin

# Lorenz at r = 21: unstable eigenvalue of the origin and the Hopf value of C+
LORENZ_LAMBDA_U = (-11.0 + math.sqrt(921.0)) / 2.0
LORENZ_R_HOPF = 10.0 * (10.0 + 8.0 / 3.0 + 3.0) / (10.0 - 8.0 / 3.0 - 1.0)
FOOD_CHAIN_XI = np.array([(2.0 + math.sqrt(6.0)) / 6.0, 1.0 / 6.0, 11.997732])


# ------------------------------------------------------------------
# Systems
# ------------------------------------------------------------------

@pytest.fixture()
def lorenz() -> SystemDefinition:
    return builtin("lorenz")


@pytest.fixture()
def circuit() -> SystemDefinition:
    return builtin("circuit")


@pytest.fixture()
def food_chain() -> SystemDefinition:
    return builtin("food_chain")


def _circle_rhs(x1, x2, x3, a, c):
    s = 1.0 - x1**2 - x2**2
    return a * x1 * s - x2, a * x2 * s + x1, -c * x3


def _circle_jac(x1, x2, x3, a, c):
    s = 1.0 - x1**2 - x2**2
    row1 = [a * s - 2.0 * a * x1**2, -2.0 * a * x1 * x2 - 1.0, 0.0]
    row2 = [-2.0 * a * x1 * x2 + 1.0, a * s - 2.0 * a * x2**2, 0.0]
    row3 = [0.0, 0.0, -c]
    return row1, row2, row3


@pytest.fixture()
def circle_system() -> SystemDefinition:
    """Attracting unit circle of period 2π; multipliers 1, e^{-2πc}, e^{-4πa}."""
    return SystemDefinition(
        name="circle",
        param_names=("a", "c"),
        param_defaults=(0.1, 0.05),
        rhs=_circle_rhs,
        jacobian=_circle_jac,
        bifurcation_params=("a", "c"),
    )


# ------------------------------------------------------------------
# Solutions
# ------------------------------------------------------------------

@pytest.fixture()
def circle_solution() -> MeshedSolution:
    """(cos 2πτ, sin 2πτ, 0) on 10 intervals of degree 4."""

    def orbit(tau: np.ndarray) -> np.ndarray:
        angle = 2.0 * math.pi * tau
        return np.column_stack([np.cos(angle), np.sin(angle), np.zeros_like(tau)])

    return MeshedSolution.from_function(orbit, uniform_mesh(10), 4, {"T_plus": 2.0 * math.pi})


# ------------------------------------------------------------------
# Settings and run configurations
# ------------------------------------------------------------------

@pytest.fixture()
def settings(tmp_path: Path) -> Settings:
    """Settings rooted in a temporary project with no output override."""
    (tmp_path / "data" / "configs").mkdir(parents=True)
    return Settings(project_root=tmp_path)


@pytest.fixture()
def write_config(tmp_path: Path):
    """Write an INI run configuration into tmp_path and return its path."""

    def _write(text: str, name: str = "run.ini") -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write


LORENZ_CONFIG = """\
[pipeline]
system = lorenz
case = u1
output_dir = out
stages = equilibrium, hopf-cycle, eigenfunction

[params]
r = 21

[stage.equilibrium]
guess = 0.1, 0.1, 0.1

[stage.hopf-cycle]
parameter = r
target = 21
pin = 1
"""


@pytest.fixture()
def lorenz_config_text() -> str:
    return LORENZ_CONFIG
