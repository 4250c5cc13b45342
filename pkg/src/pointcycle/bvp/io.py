"""Plain-text solution files, also used as the restart format.

Layout::

    n_d NTST m n_params
    name value            (one line per parameter)
    tau v_1 ... v_n_d     (one line per representation point)
"""

from __future__ import annotations

import io
import logging
from pathlib import Path

import numpy as np

from pointcycle.bvp.mesh import MeshedSolution
from pointcycle.exceptions import StructuralError

logger = logging.getLogger(__name__)


def save_solution(solution: MeshedSolution, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"{solution.n_d} {solution.ntst} {solution.degree} {len(solution.params)}"]
    header += [f"{name} {float(value)!r}" for name, value in solution.params.items()]
    table = np.column_stack([solution.points, solution.values])
    buffer = io.StringIO()
    np.savetxt(buffer, table, fmt="%.17g")
    path.write_text("\n".join(header) + "\n" + buffer.getvalue(), encoding="utf-8")
    logger.debug("Solution written to %s", path)
    return path


def load_solution(path: str | Path) -> MeshedSolution:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise StructuralError(f"{path}: empty solution file")
    try:
        n_d, ntst, degree, n_params = (int(x) for x in lines[0].split())
    except ValueError as exc:
        raise StructuralError(f"{path}: malformed header '{lines[0]}'") from exc

    params: dict[str, float] = {}
    for line in lines[1 : 1 + n_params]:
        name, value = line.split()
        params[name] = float(value)

    table = np.loadtxt(io.StringIO("\n".join(lines[1 + n_params :])), ndmin=2)
    expected = (ntst * degree + 1, n_d + 1)
    if table.shape != expected:
        raise StructuralError(f"{path}: table of shape {table.shape}, header implies {expected}")
    mesh = table[::degree, 0].copy()
    return MeshedSolution(
        mesh=mesh,
        degree=degree,
        values=table[:, 1:],
        params=params,
        metadata={"source": str(path)},
    )
