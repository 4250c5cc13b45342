from pointcycle.continuation.algebraic import (
    AlgebraicPoint,
    AlgebraicProblem,
    AlgebraicSystem,
    equilibrium_problem,
)
from pointcycle.continuation.branch import continue_branch, switch_branch
from pointcycle.continuation.events import (
    BranchEvent,
    ContinuationSettings,
    UserTarget,
    detect_branch_point,
    detect_fold,
    detect_hopf,
    write_branch,
)
from pointcycle.continuation.fold import fold_follow

# pointcycle.continuation.hopf is imported directly (it depends on pointcycle.floquet).

__all__ = [
    "AlgebraicPoint",
    "AlgebraicProblem",
    "AlgebraicSystem",
    "BranchEvent",
    "ContinuationSettings",
    "UserTarget",
    "continue_branch",
    "detect_branch_point",
    "detect_fold",
    "detect_hopf",
    "equilibrium_problem",
    "fold_follow",
    "switch_branch",
    "write_branch",
]
