from pointcycle.bvp.collocation import (
    CollocationSystem,
    assemble,
    newton_iterate,
    newton_solve,
    residual_norm,
)
from pointcycle.bvp.io import load_solution, save_solution
from pointcycle.bvp.mesh import (
    MeshedSolution,
    adapt_mesh,
    interpolate,
    merge,
    resample,
    uniform_mesh,
)
from pointcycle.bvp.problem import BVProblem, IntegralConstraint

__all__ = [
    "BVProblem",
    "CollocationSystem",
    "IntegralConstraint",
    "MeshedSolution",
    "adapt_mesh",
    "assemble",
    "interpolate",
    "load_solution",
    "merge",
    "newton_iterate",
    "newton_solve",
    "resample",
    "residual_norm",
    "save_solution",
    "uniform_mesh",
]
