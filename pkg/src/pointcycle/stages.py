"""Pipeline stage identifiers, their order and prerequisites."""

from __future__ import annotations

STAGE_EQUILIBRIUM = "equilibrium"
STAGE_HOPF_CYCLE = "hopf-cycle"
STAGE_EIGENFUNCTION = "eigenfunction"
STAGE_HOMOTOPY1 = "homotopy1"
STAGE_HOMOTOPY2 = "homotopy2"
STAGE_EXTEND_T = "extend-T"
STAGE_ONE_PAR = "one-par"
STAGE_TWO_PAR = "two-par"
STAGE_FOLD_FOLLOW = "fold-follow"

# Successive-continuation order; a config may skip stages but not reorder them.
STAGES: tuple[str, ...] = (
    STAGE_EQUILIBRIUM,
    STAGE_HOPF_CYCLE,
    STAGE_EIGENFUNCTION,
    STAGE_HOMOTOPY1,
    STAGE_HOMOTOPY2,
    STAGE_EXTEND_T,
    STAGE_ONE_PAR,
    STAGE_TWO_PAR,
    STAGE_FOLD_FOLLOW,
)

# Stages whose final solutions a stage reads.
PREREQUISITES: dict[str, tuple[str, ...]] = {
    STAGE_EQUILIBRIUM: (),
    STAGE_HOPF_CYCLE: (),
    STAGE_EIGENFUNCTION: (STAGE_HOPF_CYCLE,),
    STAGE_HOMOTOPY1: (STAGE_EQUILIBRIUM, STAGE_EIGENFUNCTION),
    STAGE_HOMOTOPY2: (STAGE_HOMOTOPY1,),
    STAGE_EXTEND_T: (STAGE_HOMOTOPY2,),
    STAGE_ONE_PAR: (STAGE_EXTEND_T,),
    STAGE_TWO_PAR: (STAGE_EXTEND_T,),
    STAGE_FOLD_FOLLOW: (STAGE_ONE_PAR,),
}

STAGE_DESCRIPTIONS: dict[str, str] = {
    STAGE_EQUILIBRIUM: "saddle equilibrium with its eigenvector and eigenvalue",
    STAGE_HOPF_CYCLE: "limit cycle continued from a Hopf point, then phase-pinned",
    STAGE_EIGENFUNCTION: "scaled adjoint eigenfunction by branch switching",
    STAGE_HOMOTOPY1: "connection homotopy driving the plane gap h1 to zero",
    STAGE_HOMOTOPY2: "connection homotopy driving the projection gap h2 to zero",
    STAGE_EXTEND_T: "primary connection continued to longer truncation times",
    STAGE_ONE_PAR: "primary connection continued in one system parameter",
    STAGE_TWO_PAR: "primary connection continued in two system parameters",
    STAGE_FOLD_FOLLOW: "fold of the connection continued in two system parameters",
}


def is_valid(stage: str) -> bool:
    return stage in PREREQUISITES


def order_is_valid(stages: list[str] | tuple[str, ...]) -> bool:
    """True when *stages* are known, unique and listed in pipeline order."""
    if not all(is_valid(s) for s in stages):
        return False
    positions = [STAGES.index(s) for s in stages]
    return positions == sorted(set(positions))
