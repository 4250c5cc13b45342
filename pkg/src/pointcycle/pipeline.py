"""Successive-continuation pipeline: run configurations, stages and exports.

A run configuration is an INI file::

    [pipeline]
    system = lorenz
    case = u1
    stages = equilibrium, hopf-cycle, eigenfunction, ...
    output_dir = output/lorenz

    [params]
    r = 21

    [stage.hopf-cycle]
    parameter = r
    ...

Every stage reads the ``final`` solution of its prerequisite (or another
label of it on restart) and writes ``<run>.branch.tsv``, one
``<run>.<label>.sol`` per labeled point and ``<stage>.final.sol``.
"""

from __future__ import annotations

import configparser
import json
import logging
import shutil
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from pointcycle.bvp.collocation import CollocationSystem, residual_norm
from pointcycle.bvp.io import load_solution, save_solution
from pointcycle.bvp.mesh import MeshedSolution, uniform_mesh
from pointcycle.config import Settings, load_settings
from pointcycle.connect import (
    BC_VARIANTS,
    CASE_U1,
    CASE_U2,
    CASES,
    CIRCLE,
    COORDINATE,
    DEFAULT_EPS,
    EquilibriumEigendata,
    build_homotopy1,
    build_homotopy2,
    build_primary,
    connection_state,
    initial_state,
    nearest_to_base,
    projection_gaps,
    solve_equilibrium,
    state_solution,
    toward_zero,
)
from pointcycle.continuation.algebraic import AlgebraicPoint, equilibrium_problem
from pointcycle.continuation.branch import continue_branch, tangent_at
from pointcycle.continuation.events import (
    FOLD,
    HOPF,
    USER_POINT,
    BranchEvent,
    ContinuationSettings,
    UserTarget,
    events_of_kind,
    read_branch,
    write_branch,
)
from pointcycle.continuation.fold import fold_follow
from pointcycle.continuation.hopf import secant_direction, start_cycle_from_hopf
from pointcycle.exceptions import (
    ConfigurationError,
    DomainError,
    PointCycleError,
    PrerequisiteMissing,
    StageFailed,
    WrongStability,
)
from pointcycle.floquet import (
    PERIOD,
    TARGETS,
    UNSTABLE,
    AdjointEigenfunction,
    CycleSolution,
    Pinning,
    adjoint_inverse_check,
    build_cycle_problem,
    build_eigenfunction_homotopy,
    compute_eigenfunction,
    correct_cycle,
    is_saddle,
    monodromy,
    product_law_residual,
    rephase,
    write_report,
)
from pointcycle.models import SystemDefinition, builtin
from pointcycle.stages import (
    PREREQUISITES,
    STAGE_EIGENFUNCTION,
    STAGE_EQUILIBRIUM,
    STAGE_EXTEND_T,
    STAGE_FOLD_FOLLOW,
    STAGE_HOMOTOPY1,
    STAGE_HOMOTOPY2,
    STAGE_HOPF_CYCLE,
    STAGE_ONE_PAR,
    STAGE_TWO_PAR,
    STAGES,
    is_valid,
    order_is_valid,
)

logger = logging.getLogger(__name__)

FINAL = "final"
SUMMARY_FILE = "summary.json"
CONFIG_COPY = "config.ini"
# Option keys whose values are system parameter names
_PARAM_KEYS = ("parameter", "parameters", "second")
_STEP_KEYS = ("ds0", "ds_min", "ds_max", "max_steps")


# ------------------------------------------------------------------
# Configuration
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class StageOptions:
    """Typed access to one ``[stage.<name>]`` section."""

    stage: str
    values: dict[str, str] = field(default_factory=dict)

    def _fail(self, key: str, message: str) -> ConfigurationError:
        return ConfigurationError(f"[stage.{self.stage}] {key}: {message}")

    def has(self, key: str) -> bool:
        return key in self.values

    def get_str(self, key: str, default: str | None = None) -> str:
        value = self.values.get(key, default)
        if value is None:
            raise self._fail(key, "required option is missing")
        return value

    def get_float(self, key: str, default: float | None = None) -> float:
        if key not in self.values:
            if default is None:
                raise self._fail(key, "required option is missing")
            return default
        try:
            return float(self.values[key])
        except ValueError:
            raise self._fail(key, f"'{self.values[key]}' is not a number") from None

    def get_int(self, key: str, default: int | None = None) -> int:
        value = self.get_float(key, None if default is None else float(default))
        if value != int(value):
            raise self._fail(key, f"'{value}' is not an integer")
        return int(value)

    def get_bool(self, key: str, default: bool = False) -> bool:
        if key not in self.values:
            return default
        value = self.values[key].strip().lower()
        if value in ("1", "true", "yes", "on"):
            return True
        if value in ("0", "false", "no", "off"):
            return False
        raise self._fail(key, f"'{self.values[key]}' is not a boolean")

    def get_names(self, key: str, default: Sequence[str] | None = None) -> tuple[str, ...]:
        if key not in self.values:
            if default is None:
                raise self._fail(key, "required option is missing")
            return tuple(default)
        return tuple(n.strip() for n in self.values[key].split(",") if n.strip())

    def get_floats(self, key: str, default: Sequence[float] | None = None) -> tuple[float, ...]:
        names = self.get_names(key, None if default is None else [repr(float(v)) for v in default])
        try:
            return tuple(float(n) for n in names)
        except ValueError:
            raise self._fail(key, f"'{self.values[key]}' is not a list of numbers") from None

    def bounds(self, name: str) -> tuple[float, float] | None:
        key = f"{name}_bounds"
        if key not in self.values:
            return None
        lo, hi = self.get_floats(key)
        if not lo < hi:
            raise self._fail(key, f"lower bound {lo} is not below upper bound {hi}")
        return lo, hi

    def settings(self, base: Settings, prefix: str = "", **overrides) -> ContinuationSettings:
        """Continuation settings from ``ds0``, ``ds_min``, ``ds_max``, ``max_steps``, ``adapt_every``.

        With *prefix* (``"eps_"``, ``"scan_"``, ...) a prefixed key wins over the plain one.
        """

        def key(name: str) -> str:
            return prefix + name if self.has(prefix + name) else name

        values = {
            "ds0": self.get_float(key("ds0"), 0.01),
            "ds_min": self.get_float(key("ds_min"), 1e-8),
            "ds_max": self.get_float(key("ds_max"), 0.1),
            "max_steps": self.get_int(key("max_steps"), base.max_steps),
            "adapt_every": self.get_int(key("adapt_every"), 0),
            "tol": base.newton_tol,
            "max_iter": base.newton_max_iter,
        }
        values.update(overrides)
        return ContinuationSettings(**values)


@dataclass(frozen=True, slots=True)
class PipelineConfig:
    name: str
    system: str
    case: str
    params: dict[str, float]
    stages: tuple[str, ...]
    output_dir: Path
    ntst: int
    ncol: int
    sections: dict[str, dict[str, str]] = field(default_factory=dict)
    source: Path | None = None

    def options(self, stage: str) -> StageOptions:
        return StageOptions(stage, dict(self.sections.get(stage, {})))

    @property
    def definition(self) -> SystemDefinition:
        return builtin(self.system)


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str  # parameter names are case-sensitive
    return parser


def parse_config(text: str, source: Path | None = None, settings: Settings | None = None) -> PipelineConfig:
    """Parse and validate a run configuration."""
    settings = settings or load_settings()
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"unreadable configuration: {exc}") from exc
    if not parser.has_section("pipeline"):
        raise ConfigurationError("configuration has no [pipeline] section")
    head = parser["pipeline"]

    system = builtin(head.get("system", "").strip())
    case = head.get("case", "").strip()
    if case not in CASES:
        raise ConfigurationError(f"case: must be one of {CASES}, got '{case}'")

    params = system.defaults()
    if parser.has_section("params"):
        for name, value in parser["params"].items():
            if not system.has_param(name):
                raise ConfigurationError(f"params: system '{system.name}' has no parameter '{name}'")
            try:
                params[name] = float(value)
            except ValueError:
                raise ConfigurationError(f"params: {name} = '{value}' is not a number") from None

    stages = tuple(s.strip() for s in head.get("stages", ",".join(STAGES)).split(",") if s.strip())
    unknown = [s for s in stages if not is_valid(s)]
    if unknown:
        raise ConfigurationError(f"stages: unknown stage(s) {unknown}; known: {', '.join(STAGES)}")
    if not order_is_valid(stages):
        raise ConfigurationError(f"stages: {', '.join(stages)} are not in pipeline order")

    sections: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section in ("pipeline", "params"):
            continue
        if not section.startswith("stage."):
            raise ConfigurationError(f"unknown section [{section}]")
        stage = section.removeprefix("stage.")
        if not is_valid(stage):
            raise ConfigurationError(f"[{section}]: unknown stage '{stage}'")
        sections[stage] = dict(parser[section].items())
        for key in _PARAM_KEYS:
            for name in StageOptions(stage, sections[stage]).get_names(key, ()):
                if not system.has_param(name):
                    raise ConfigurationError(f"[{section}] {key}: system '{system.name}' has no parameter '{name}'")

    target = sections.get(STAGE_EIGENFUNCTION, {}).get("target", UNSTABLE)
    if target not in TARGETS:
        raise ConfigurationError(f"[stage.eigenfunction] target: must be one of {TARGETS}, got '{target}'")

    base = source.parent if source is not None else Path.cwd()
    output_dir = settings.output_override or (base / head.get("output_dir", "output")).resolve()
    try:
        ntst = int(head.get("ntst", str(settings.ntst)))
        ncol = int(head.get("ncol", str(settings.ncol)))
    except ValueError as exc:
        raise ConfigurationError(f"ntst/ncol must be integers: {exc}") from None
    return PipelineConfig(
        name=head.get("name", source.stem if source else system.name),
        system=system.name,
        case=case,
        params=params,
        stages=stages,
        output_dir=output_dir,
        ntst=ntst,
        ncol=ncol,
        sections=sections,
        source=source,
    )


def load_config(path: str | Path, settings: Settings | None = None) -> PipelineConfig:
    """Read a configuration file; a bare name resolves to ``data/configs/<name>.ini``."""
    settings = settings or load_settings()
    path = Path(path)
    if not path.exists() and path.suffix == "" and (settings.configs_path / f"{path}.ini").exists():
        path = settings.configs_path / f"{path}.ini"
    if not path.exists():
        raise ConfigurationError(f"configuration file not found: {path}")
    config = parse_config(path.read_text(encoding="utf-8"), source=path.resolve(), settings=settings)
    logger.info("Loaded configuration '%s' (%s, case %s) from %s", config.name, config.system, config.case, path)
    return config


# ------------------------------------------------------------------
# Stage context and file helpers
# ------------------------------------------------------------------

@dataclass(slots=True)
class StageResult:
    stage: str
    scalars: dict = field(default_factory=dict)
    files: list[str] = field(default_factory=list)


@dataclass(slots=True)
class _Context:
    config: PipelineConfig
    system: SystemDefinition
    settings: Settings
    stage: str
    restart: str | None
    result: StageResult

    @property
    def out(self) -> Path:
        return self.config.output_dir

    @property
    def options(self) -> StageOptions:
        return self.config.options(self.stage)

    def path(self, run: str, label: str | int) -> Path:
        return self.out / f"{run}.{label}.sol"

    def save(self, run: str, label: str | int, solution: MeshedSolution) -> Path:
        path = save_solution(solution, self.path(run, label))
        self.result.files.append(path.name)
        return path

    def save_final(self, solution: MeshedSolution) -> Path:
        path = self.save(self.stage, FINAL, solution)
        logger.info("Stage %s: final solution written to %s", self.stage, path)
        return path

    def write_run(self, run: str, events: list[BranchEvent]) -> None:
        path = write_branch(events, self.out / f"{run}.branch.tsv")
        self.result.files.append(path.name)
        for event in events:
            if event.label is not None and isinstance(event.payload, MeshedSolution):
                self.save(run, event.label, event.payload)

    def load(self, stage: str, label: str | int = FINAL) -> MeshedSolution:
        path = self.path(stage, label)
        if not path.exists():
            raise PrerequisiteMissing(f"stage '{self.stage}' needs {path.name}; run stage '{stage}' first")
        return load_solution(path)

    def start(self) -> MeshedSolution:
        """The prerequisite solution this stage starts from."""
        previous = PREREQUISITES[self.stage][-1]
        return self.load(previous, self.restart or FINAL)


def _coordinate(options: StageOptions, key: str, default: int) -> int:
    """1-based coordinate option as a 0-based index."""
    j = options.get_int(key, default)
    if j not in (1, 2, 3):
        raise ConfigurationError(f"[stage.{options.stage}] {key}: coordinate must be 1, 2 or 3, got {j}")
    return j - 1


def _targets(name: str, values: Sequence[float], stop_last: bool = True) -> tuple[UserTarget, ...]:
    return tuple(
        UserTarget(name, v, stop=stop_last and i == len(values) - 1) for i, v in enumerate(values)
    )


def _direction(start: float, target: float) -> int:
    return 1 if target >= start else -1


def _last_user_point(events: list[BranchEvent], what: str) -> MeshedSolution:
    points = events_of_kind(events, USER_POINT)
    if not points:
        raise DomainError(f"continuation did not reach {what}")
    return points[-1].payload


def _eta(ctx: _Context) -> np.ndarray | None:
    options = ctx.config.options(STAGE_EQUILIBRIUM)
    return np.asarray(options.get_floats("eta")) if options.has("eta") else None


def _state(ctx: _Context, solution: MeshedSolution):
    return connection_state(ctx.system, solution, _eta(ctx))


def _pinning(ctx: _Context, cycle: CycleSolution) -> Pinning:
    j = _coordinate(ctx.config.options(STAGE_HOPF_CYCLE), "pin", 1)
    j = _coordinate(ctx.options, "pin", j + 1)
    value = ctx.options.get_float("pin_value", float(cycle.base_point[j]))
    return Pinning(j, value)


def _lam_bounds(lam: float, options: StageOptions) -> dict[str, tuple[float, float]]:
    """Stop when the log multiplier comes within ``lam_stop`` of zero."""
    stop = options.get_float("lam_stop", 0.0)
    if stop <= 0.0:
        return {}
    return {"lam": (stop, 1e6)} if lam > 0.0 else {"lam": (-1e6, -stop)}


def _param_bounds(options: StageOptions, names: Sequence[str]) -> dict[str, tuple[float, float]]:
    return {name: b for name in names if (b := options.bounds(name)) is not None}


def _directions(options: StageOptions) -> tuple[int, ...]:
    values = options.get_floats("directions", (1.0, -1.0))
    if any(v not in (1.0, -1.0) for v in values):
        raise ConfigurationError(f"[stage.{options.stage}] directions: use 1 and/or -1")
    return tuple(int(v) for v in values)


def _suffix(direction: int) -> str:
    return "fwd" if direction > 0 else "bwd"


def _variant(ctx: _Context, default: str) -> str:
    variant = ctx.options.get_str("variant", default)
    if variant not in BC_VARIANTS:
        raise ConfigurationError(f"[stage.{ctx.stage}] variant: must be one of {BC_VARIANTS}, got '{variant}'")
    return variant


# ------------------------------------------------------------------
# Stages
# ------------------------------------------------------------------

def _equilibrium_solution(eq: EquilibriumEigendata, params: dict[str, float]) -> MeshedSolution:
    values = {**params, **eq.params(), "n_u": 1.0 if eq.case == CASE_U1 else 2.0}
    return MeshedSolution.constant(eq.xi, uniform_mesh(1), 1, values)


def _load_equilibrium(ctx: _Context) -> EquilibriumEigendata:
    solution = ctx.load(STAGE_EQUILIBRIUM)
    case = CASE_U1 if solution.params["n_u"] == 1.0 else CASE_U2
    return EquilibriumEigendata.from_params(solution.params, case, _eta(ctx))


def _run_equilibrium(ctx: _Context) -> None:
    options = ctx.options
    guess = options.get_floats("guess", (0.0, 0.0, 0.0))
    v_guess = options.get_floats("v_guess") if options.has("v_guess") else None
    eq = solve_equilibrium(
        ctx.system,
        ctx.config.params,
        ctx.config.case,
        guess,
        v_guess=v_guess,
        eta=_eta(ctx),
        strong=options.get_bool("strong"),
        tol=ctx.settings.newton_tol,
        max_iter=ctx.settings.newton_max_iter,
    )
    ctx.save_final(_equilibrium_solution(eq, ctx.config.params))
    ctx.result.scalars.update(
        xi=eq.xi.tolist(), v=eq.v.tolist(), lambda_eq=eq.lambda_eq,
        residual=eq.residual(ctx.system, ctx.config.params),
    )


def _cycle_at_target(ctx: _Context, problem, cycle: MeshedSolution, name: str, target: float) -> MeshedSolution:
    """First saddle cycle of the family at ``name = target``.

    The family may cross the target several times (around folds of cycles).
    ``crossing = k`` takes the k-th crossing regardless of stability.
    """
    options = ctx.options
    settings = options.settings(
        ctx.settings, detect=frozenset(), user_targets=(UserTarget(name, target),),
        bounds=_param_bounds(options, [name]),
    )
    past = options.settings(ctx.settings, detect=frozenset(), max_steps=1)
    forced = options.get_int("crossing", 0)
    start, direction = cycle, secant_direction(problem, cycle)
    periods = []
    for count in range(1, options.get_int("max_crossings", 4) + 1):
        run = f"{ctx.stage}.cycles" + ("" if count == 1 else str(count))
        events = continue_branch(problem, start, direction, settings)
        ctx.write_run(run, events)
        points = events_of_kind(events, USER_POINT)
        if not points:
            break
        point = points[-1]
        candidate = point.payload
        periods.append(candidate.params[PERIOD])
        if forced:
            accepted = forced == count
        else:
            accepted = is_saddle(monodromy(ctx.system, candidate))
        if accepted:
            logger.info("Cycle at %s = %g taken from crossing %d (%s = %.8g)", name, target, count, PERIOD, periods[-1])
            ctx.result.scalars.update(crossing=count, crossing_periods=periods)
            return candidate
        logger.info("Crossing %d at %s = %g skipped; continuing the family", count, name, target)
        step = continue_branch(point.data["discretization"], point.data["z"], point.data["tangent"], past)
        last = step[-1]
        problem, start, direction = last.data["discretization"], last.data["z"], last.data["tangent"]
    if not periods:
        raise DomainError(f"continuation did not reach {name} = {target}")
    raise WrongStability(f"no saddle cycle at {name} = {target} among {len(periods)} crossings (periods {periods})")


def _run_hopf_cycle(ctx: _Context) -> None:
    options = ctx.options
    name = options.get_str("parameter")
    target = options.get_float("target", ctx.config.params[name])
    start = {**ctx.config.params, name: options.get_float("start", ctx.config.params[name])}

    scan_bounds = _param_bounds(options, [name])
    scan = options.settings(
        ctx.settings,
        "scan_",
        ds0=options.get_float("scan_ds0", 0.01) * options.get_int("direction", 1),
        detect=frozenset({HOPF}),
        bounds=scan_bounds,
        adapt_every=0,
    )
    guess = options.get_floats("equilibrium", (0.0, 0.0, 0.0))
    problem = equilibrium_problem(ctx.system, start, name)
    events = continue_branch(problem, AlgebraicPoint(np.asarray(guess), problem.params), 1, scan)
    ctx.write_run(f"{ctx.stage}.equilibria", events)
    hopf = events_of_kind(events, HOPF)
    if not hopf:
        raise DomainError(f"no Hopf point on the equilibrium branch in {name}")
    event = hopf[0]
    ctx.result.scalars["hopf"] = {name: event.params[name], "omega": event.data["omega"]}

    cycle = start_cycle_from_hopf(
        ctx.system,
        event,
        options.get_float("amplitude", 1e-3),
        ntst=ctx.config.ntst,
        ncol=ctx.config.ncol,
        tol=ctx.settings.newton_tol,
        max_iter=ctx.settings.newton_max_iter,
    )
    cycle_problem = build_cycle_problem(ctx.system, cycle, free=(name,))
    final = _cycle_at_target(ctx, cycle_problem, cycle, name, target)

    j = _coordinate(options, "pin", 1)
    if options.has("pin_value"):
        value = options.get_float("pin_value")
        final = rephase(final, j, value, options.get_str("pin_direction", "up"))
    else:
        value = float(final.start[j])
    pinned = correct_cycle(
        ctx.system, final, free=(name,), phase=Pinning(j, value),
        tol=ctx.settings.newton_tol, max_iter=ctx.settings.newton_max_iter,
    )
    ctx.save_final(pinned.x_plus)

    report = monodromy(ctx.system, pinned)
    ctx.result.files.append(write_report(report, ctx.out / f"{ctx.stage}.monodromy.txt").name)
    ctx.result.scalars.update(
        T_plus=pinned.T_plus,
        base_point=pinned.base_point.tolist(),
        multipliers=[[float(m.real), float(m.imag)] for m in report.multipliers],
        product_law=product_law_residual(ctx.system, pinned, report),
        adjoint_reciprocity=adjoint_inverse_check(report),
    )


def _load_eigenfunction(ctx: _Context, solution: MeshedSolution) -> AdjointEigenfunction:
    target = ctx.config.options(STAGE_EIGENFUNCTION).get_str("target", UNSTABLE)
    return AdjointEigenfunction(
        w=solution.component(3, 6),
        lam=solution.params["lam"],
        s=1 if solution.params["s"] > 0 else -1,
        target=target,
        solution=solution,
    )


def _run_eigenfunction(ctx: _Context) -> None:
    options = ctx.options
    cycle = CycleSolution(ctx.start())
    eig = compute_eigenfunction(
        ctx.system,
        cycle,
        options.get_str("target", UNSTABLE),
        options.settings(ctx.settings) if any(options.has(k) for k in _STEP_KEYS) else None,
        use_oracle=options.get_bool("use_oracle", True),
        scan_step=options.get_float("scan_step", 0.02),
    )
    ctx.save_final(eig.solution.with_params(s=float(eig.s)))
    ctx.result.scalars.update(lam=eig.lam, multiplier=eig.multiplier, w0=eig.w.start.tolist(), s=eig.s)


def _run_homotopy1(ctx: _Context) -> None:
    options = ctx.options
    eq = _load_equilibrium(ctx)
    composite = ctx.start()
    cycle = CycleSolution(composite.component(0, 3))
    eig = _load_eigenfunction(ctx, composite)
    state = initial_state(
        ctx.system,
        eq,
        cycle,
        eig,
        eps=options.get_float("eps", DEFAULT_EPS),
        T=options.get_float("T0") if options.has("T0") else None,
        ntst=options.get_int("ntst", ctx.config.ntst),
    )
    phase = _pinning(ctx, cycle)
    active = options.get_names("active") if options.has("active") else None
    problem = build_homotopy1(ctx.system, state, phase, active)
    start = state_solution(state, problem)

    principal = problem.free[0]
    if principal == "h1":
        direction, stop = toward_zero(problem.params["h1"]), True
    else:
        direction, stop = options.get_int("direction", 1), False
    settings = options.settings(
        ctx.settings,
        detect=frozenset(),
        user_targets=(UserTarget("h1", 0.0, stop=stop),),
        bounds={"T": (0.0, options.get_float("T_max", 1e3))},
    )
    events = continue_branch(problem, start, direction, settings)
    ctx.write_run(ctx.stage, events)
    zeros = events_of_kind(events, USER_POINT)
    ctx.result.scalars["zeros_T"] = [e.params.get("T", state.T) for e in zeros]
    best = nearest_to_base(events)
    ctx.save_final(best.payload)
    ctx.result.scalars.update(T=best.payload.params["T"], label=best.label)


def _run_homotopy2(ctx: _Context) -> None:
    options = ctx.options
    state = _state(ctx, ctx.start())
    alpha1 = options.get_str("parameter") if state.case == CASE_U1 else None
    problem = build_homotopy2(ctx.system, state, alpha1)
    start = state_solution(state, problem)
    settings = options.settings(
        ctx.settings, detect=frozenset(), user_targets=(UserTarget("h2", 0.0),)
    )
    events = continue_branch(problem, start, toward_zero(problem.params["h2"]), settings)
    ctx.write_run(ctx.stage, events)
    final = _last_user_point(events, "h2 = 0")
    ctx.save_final(final)
    ctx.result.scalars.update({k: final.params[k] for k in problem.free[:3]})


def _primary_active(ctx: _Context, state, lead: str) -> tuple[str, ...]:
    if state.case == CASE_U1:
        return (lead, ctx.options.get_str("parameter"))
    return (lead,)


def _run_extend_t(ctx: _Context) -> None:
    options = ctx.options
    state = _state(ctx, ctx.start())
    variant = _variant(ctx, CIRCLE if state.case == CASE_U2 else COORDINATE)
    j = _coordinate(options, "coordinate", 2)
    targets = options.get_floats("T_targets")
    active = _primary_active(ctx, state, "T")
    problem = build_primary(ctx.system, state, active, variant, coordinate=j)
    start = state_solution(state)
    settings = options.settings(ctx.settings, detect=frozenset(), user_targets=_targets("T", targets))
    events = continue_branch(problem, start, _direction(state.T, targets[-1]), settings)
    ctx.write_run(ctx.stage, events)

    table = pd.DataFrame(
        [{"T": e.params["T"], **{k: e.params[k] for k in active[1:]}, "lam": e.params["lam"]}
         for e in events_of_kind(events, USER_POINT)]
    )
    table_path = ctx.out / f"{ctx.stage}.convergence.tsv"
    table.to_csv(table_path, sep="\t", index=False, float_format="%.17g")
    ctx.result.files.append(table_path.name)
    ctx.result.scalars["convergence"] = table.to_dict(orient="records")
    final = _last_user_point(events, f"T = {targets[-1]}")

    if options.has("eps_target"):
        eps_target = options.get_float("eps_target")
        state = _state(ctx, final)
        problem = build_primary(ctx.system, state, _primary_active(ctx, state, "eps"), variant, coordinate=j)
        settings = options.settings(ctx.settings, "eps_", detect=frozenset(), user_targets=(UserTarget("eps", eps_target),))
        events = continue_branch(problem, state_solution(state), _direction(state.eps, eps_target), settings)
        ctx.write_run(f"{ctx.stage}.eps", events)
        final = _last_user_point(events, f"eps = {eps_target}")

    if options.has("align"):
        if state.case != CASE_U2:
            raise ConfigurationError(f"[stage.{ctx.stage}] align: only case u2 has a departure circle")
        k = _coordinate(options, "align", 2)
        state = _state(ctx, final)
        problem = build_primary(ctx.system, state, ("g", "eps"), CIRCLE, align=k)
        settings = options.settings(ctx.settings, "align_", detect=frozenset(), user_targets=(UserTarget("g", 0.0),))
        events = continue_branch(problem, state_solution(state, problem), toward_zero(problem.params["g"]), settings)
        ctx.write_run(f"{ctx.stage}.align", events)
        final = _last_user_point(events, "g = 0")

    ctx.save_final(final)
    w_gap, f_gap = projection_gaps(ctx.system, final)
    ctx.result.scalars.update(T=final.params["T"], eps=final.params["eps"], projection_gap=w_gap, plane_gap=f_gap)


def _final_variant(ctx: _Context, case: str) -> str:
    """Departure variant of extend-T's final solution."""
    options = ctx.config.options(STAGE_EXTEND_T)
    if case == CASE_U2 and options.has("align"):
        return COORDINATE
    variant = options.get_str("variant", CIRCLE if case == CASE_U2 else COORDINATE)
    return variant


def _one_par_variant(ctx: _Context) -> tuple[str, int]:
    options = ctx.config.options(STAGE_ONE_PAR)
    variant = options.get_str("variant", _final_variant(ctx, CASE_U2))
    if variant not in BC_VARIANTS:
        raise ConfigurationError(f"[stage.one-par] variant: must be one of {BC_VARIANTS}, got '{variant}'")
    return variant, _coordinate(options, "coordinate", _extend_coordinate(ctx) + 1)


def _extend_coordinate(ctx: _Context) -> int:
    """Coordinate of the departure plane left by extend-T (its alignment coordinate if any)."""
    options = ctx.config.options(STAGE_EXTEND_T)
    return _coordinate(options, "align" if options.has("align") else "coordinate", 2)


def _run_one_par(ctx: _Context) -> None:
    options = ctx.options
    state = _state(ctx, ctx.start())
    if state.case != CASE_U2:
        raise ConfigurationError("one-par runs need case u2; use two-par for case u1")
    variant, j = _one_par_variant(ctx)
    folds: dict[str, list[float]] = {}
    for name in options.get_names("parameters"):
        problem = build_primary(ctx.system, state, (name,), variant, coordinate=j)
        bounds = {**_param_bounds(options, [name]), **_lam_bounds(state.eig.lam, options)}
        for direction in _directions(options):
            settings = options.settings(ctx.settings, detect=frozenset({FOLD}), bounds=bounds)
            events = continue_branch(problem, state_solution(state), direction, settings)
            run = f"{ctx.stage}.{name}.{_suffix(direction)}"
            ctx.write_run(run, events)
            folds.setdefault(name, []).extend(e.params[name] for e in events_of_kind(events, FOLD))
            ctx.result.scalars[f"{run}.end"] = events[-1].params[name]
    ctx.result.scalars["folds"] = folds
    ctx.save_final(state_solution(state))


def _run_two_par(ctx: _Context) -> None:
    options = ctx.options
    state = _state(ctx, ctx.start())
    if state.case != CASE_U1:
        raise ConfigurationError("two-par runs need case u1; use fold-follow for case u2")
    names = options.get_names("parameters")
    if len(names) != 2:
        raise ConfigurationError(f"[stage.two-par] parameters: need two names, got {names}")
    problem = build_primary(ctx.system, state, names)
    bounds = {**_param_bounds(options, names), **_lam_bounds(state.eig.lam, options)}
    final = None
    for direction in _directions(options):
        settings = options.settings(ctx.settings, detect=frozenset(), bounds=bounds)
        events = continue_branch(problem, state_solution(state), direction, settings)
        run = f"{ctx.stage}.{_suffix(direction)}"
        ctx.write_run(run, events)
        ctx.result.scalars[f"{run}.end"] = {n: events[-1].params[n] for n in names}
        if final is None:
            final = events[-1].payload
    ctx.save_final(final)


def _fold_event(ctx: _Context, run: str, which: str) -> BranchEvent:
    """Rebuild a fold event of a one-par run from its branch and solution files."""
    path = ctx.out / f"{run}.branch.tsv"
    if not path.exists():
        raise PrerequisiteMissing(f"stage '{ctx.stage}' needs {path.name}; run stage 'one-par' first")
    frame = read_branch(path)
    folds = frame[frame["kind"] == FOLD]
    if folds.empty:
        raise DomainError(f"{run} has no fold")
    if which == "first":
        label = folds["label"].iloc[0]
    elif which == "last":
        label = folds["label"].iloc[-1]
    else:
        label = which
    solution = ctx.load(run, label)
    name = run.split(".")[1]
    variant, j = _one_par_variant(ctx)
    state = _state(ctx, solution)
    problem = build_primary(ctx.system, state, (name,), variant, coordinate=j, check=False)
    disc = CollocationSystem(problem, solution.mesh, solution.degree)
    z = disc.pack(solution)
    tangent = tangent_at(disc, z, np.ones(disc.size))
    return BranchEvent(
        kind=FOLD,
        step=0,
        params={p: float(z[disc.param_index(p)]) for p in disc.free},
        norm=disc.norm(z),
        payload=solution,
        label=int(label),
        data={"z": z, "tangent": tangent, "discretization": disc},
    )


def _run_fold_follow(ctx: _Context) -> None:
    options = ctx.options
    one_par = ctx.config.options(STAGE_ONE_PAR)
    default_run = f"{STAGE_ONE_PAR}.{one_par.get_names('parameters')[0]}.fwd" if one_par.has("parameters") else None
    run = options.get_str("run", default_run)
    event = _fold_event(ctx, run, ctx.restart or options.get_str("fold", "last"))
    second = options.get_str("second")
    first = run.split(".")[1]
    bounds = {**_param_bounds(options, [first, second]), **_lam_bounds(event.params["lam"], options)}
    final = None
    for direction in _directions(options):
        settings = options.settings(ctx.settings, detect=frozenset(), bounds=bounds)
        events = fold_follow(event, second, settings, direction)
        name = f"{ctx.stage}.{_suffix(direction)}"
        ctx.write_run(name, events)
        ctx.result.scalars[f"{name}.end"] = {
            first: events[-1].params[first], second: events[-1].params[second], "lam": events[-1].params["lam"]
        }
        if final is None:
            final = events[-1].payload
    ctx.save_final(final)


_RUNNERS: dict[str, Callable[[_Context], None]] = {
    STAGE_EQUILIBRIUM: _run_equilibrium,
    STAGE_HOPF_CYCLE: _run_hopf_cycle,
    STAGE_EIGENFUNCTION: _run_eigenfunction,
    STAGE_HOMOTOPY1: _run_homotopy1,
    STAGE_HOMOTOPY2: _run_homotopy2,
    STAGE_EXTEND_T: _run_extend_t,
    STAGE_ONE_PAR: _run_one_par,
    STAGE_TWO_PAR: _run_two_par,
    STAGE_FOLD_FOLLOW: _run_fold_follow,
}


# ------------------------------------------------------------------
# Public operations
# ------------------------------------------------------------------

def _copy_config(config: PipelineConfig) -> None:
    config.output_dir.mkdir(parents=True, exist_ok=True)
    if config.source is not None:
        target = config.output_dir / CONFIG_COPY
        if config.source != target.resolve():
            shutil.copyfile(config.source, target)


def run_stage(
    config: PipelineConfig,
    stage: str,
    restart: str | None = None,
    settings: Settings | None = None,
) -> StageResult:
    """Run one stage; solver errors are re-raised as StageFailed."""
    if not is_valid(stage):
        raise ConfigurationError(f"unknown stage '{stage}'; known: {', '.join(STAGES)}")
    settings = settings or load_settings()
    _copy_config(config)
    ctx = _Context(
        config=config,
        system=config.definition,
        settings=settings,
        stage=stage,
        restart=restart,
        result=StageResult(stage),
    )
    logger.info("Stage %s started%s", stage, f" (restart from label {restart})" if restart else "")
    try:
        _RUNNERS[stage](ctx)
    except ConfigurationError:
        raise
    except PointCycleError as exc:
        raise StageFailed(stage, str(exc)) from exc
    logger.info("Stage %s finished: %s", stage, _brief(ctx.result.scalars))
    return ctx.result


def _brief(scalars: dict) -> str:
    items = [f"{k}={v:.10g}" for k, v in scalars.items() if isinstance(v, float)]
    return ", ".join(items) or "no scalars"


def run_all(config: PipelineConfig, settings: Settings | None = None) -> dict:
    """Run every configured stage in order and write ``summary.json``."""
    settings = settings or load_settings()
    summary: dict = {"name": config.name, "system": config.system, "case": config.case, "stages": {}}
    path = config.output_dir / SUMMARY_FILE
    try:
        for stage in config.stages:
            result = run_stage(config, stage, settings=settings)
            summary["stages"][stage] = {"scalars": result.scalars, "files": result.files}
    finally:
        config.output_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(summary, ensure_ascii=False, indent=2, default=_json_default), encoding="utf-8")
        logger.info("Summary written to %s", path)
    return summary


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _projection_columns(projection: str, available: Sequence[str]) -> list[str]:
    parts = [p.strip() for p in projection.split(",")]
    if len(parts) != 2:
        raise ConfigurationError(f"projection '{projection}' must name two columns as i,j")
    columns = []
    for part in parts:
        if part.isdigit():
            index = int(part)
            if not 1 <= index <= len(available):
                raise ConfigurationError(f"projection index {index} outside 1..{len(available)}")
            columns.append(available[index - 1])
        elif part in available:
            columns.append(part)
        else:
            raise ConfigurationError(f"unknown projection column '{part}'; available: {', '.join(available)}")
    return columns


def export_plot_data(path: str | Path, projection: str, out: str | Path | None = None) -> Path:
    """Two-column text file for external plotting.

    A solution file exports ``(x_i, x_j)`` of its state components (1-based
    or ``x<i>``); a branch file exports two of its parameter columns.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"file not found: {path}")
    if path.suffix == ".sol":
        solution = load_solution(path)
        frame = pd.DataFrame(solution.values, columns=[f"x{i + 1}" for i in range(solution.n_d)])
        frame.insert(0, "tau", solution.points)
        names = list(frame.columns)
    else:
        frame = read_branch(path)
        fixed = {"step", "kind", "label"}
        names = [c for c in frame.columns if c not in fixed]
    columns = _projection_columns(projection, names)
    target = Path(out) if out else path.with_name(f"{path.stem}.{columns[0]}_{columns[1]}.dat")
    frame[columns].to_csv(target, sep="\t", index=False, float_format="%.17g")
    logger.info("Projection %s written to %s (%d rows)", ",".join(columns), target, len(frame))
    return target


def verify(path: str | Path, config: PipelineConfig, stage: str) -> float:
    """Re-assemble *stage*'s defining system at a solution file and return its residual max-norm."""
    if not is_valid(stage):
        raise ConfigurationError(f"unknown stage '{stage}'; known: {', '.join(STAGES)}")
    system = config.definition
    solution = load_solution(path)
    ctx = _Context(config, system, load_settings(), stage, None, StageResult(stage))
    if stage == STAGE_EQUILIBRIUM:
        case = CASE_U1 if solution.params["n_u"] == 1.0 else CASE_U2
        value = EquilibriumEigendata.from_params(solution.params, case).residual(system, solution.params)
    elif stage == STAGE_HOPF_CYCLE:
        options = config.options(STAGE_HOPF_CYCLE)
        j = _coordinate(options, "pin", 1)
        problem = build_cycle_problem(
            system, solution, free=(options.get_str("parameter"),), phase=Pinning(j, float(solution.start[j]))
        )
        value = residual_norm(problem, solution)
    elif stage == STAGE_EIGENFUNCTION:
        problem = build_eigenfunction_homotopy(
            system,
            solution.component(0, 3),
            config.options(STAGE_EIGENFUNCTION).get_str("target", UNSTABLE),
            s=1 if solution.params["s"] > 0 else -1,
            lam=solution.params["lam"],
            h=solution.params.get("h", 1.0),
        )
        value = residual_norm(problem, solution)
    else:
        state = _state(ctx, solution)
        if stage == STAGE_HOMOTOPY1:
            problem = build_homotopy1(system, state, _pinning(ctx, state.cycle))
        elif stage == STAGE_HOMOTOPY2:
            alpha1 = config.options(STAGE_HOMOTOPY2).get_str("parameter") if state.case == CASE_U1 else None
            problem = build_homotopy2(system, state, alpha1)
        else:
            problem = _verify_primary(ctx, state, stage)
        value = residual_norm(problem, solution)
    logger.info("Residual of %s under stage %s: %.3e", path, stage, value)
    return value


def _verify_primary(ctx: _Context, state, stage: str):
    if state.case == CASE_U1:
        options = ctx.config.options(STAGE_EXTEND_T)
        return build_primary(ctx.system, state, ("T", options.get_str("parameter")), check=False)
    if stage == STAGE_EXTEND_T:
        variant = _final_variant(ctx, CASE_U2)
        j = _extend_coordinate(ctx)
    else:
        variant, j = _one_par_variant(ctx)
    return build_primary(ctx.system, state, ("T",), variant, coordinate=j, check=False)
