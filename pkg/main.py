"""pointcycle: heteroclinic connections from an equilibrium to a limit cycle.

Entry point: can be run directly (`python main.py run lorenz`)
or via the package script (`pointcycle run lorenz`).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

_SRC_PATH = str(Path(__file__).resolve().parent / "src")
if _SRC_PATH not in sys.path:
    sys.path.insert(0, _SRC_PATH)

from pointcycle.config import Settings, load_settings
from pointcycle.exceptions import PointCycleError
from pointcycle.pipeline import export_plot_data, load_config, run_all, run_stage, verify
from pointcycle.stages import STAGES

logger = logging.getLogger("pointcycle")


# ------------------------------------------------------------------
# Logging
# ------------------------------------------------------------------

def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        stream=sys.stdout,
    )


# ------------------------------------------------------------------
# Commands
# ------------------------------------------------------------------

def _cmd_run(args: argparse.Namespace, settings: Settings) -> int:
    config = load_config(args.config, settings)
    if args.stage is None:
        if args.restart is not None:
            raise PointCycleError("--restart needs --stage")
        summary = run_all(config, settings)
        logger.info("Pipeline '%s' finished: %d stage(s)", config.name, len(summary["stages"]))
        return 0
    result = run_stage(config, args.stage, restart=args.restart, settings=settings)
    print(json.dumps(result.scalars, ensure_ascii=False, indent=2, default=str))
    return 0


def _cmd_export(args: argparse.Namespace, settings: Settings) -> int:
    path = export_plot_data(args.file, args.proj, args.out)
    print(path)
    return 0


def _cmd_verify(args: argparse.Namespace, settings: Settings) -> int:
    config = load_config(args.config, settings)
    value = verify(args.file, config, args.stage)
    print(f"{value:.3e}")
    if value > args.tol:
        logger.error("Residual %.3e exceeds tolerance %.1e", value, args.tol)
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointcycle",
        description="Continue point-to-cycle connecting orbits of 3D vector fields.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a pipeline or one of its stages")
    run.add_argument("config", help="configuration file or built-in name (lorenz, circuit, food_chain)")
    run.add_argument("--stage", choices=STAGES, help="run only this stage")
    run.add_argument("--restart", help="label of the prerequisite's solution to start from")
    run.set_defaults(handler=_cmd_run)

    export = sub.add_parser("export", help="write two columns of a solution or branch file")
    export.add_argument("file", type=Path)
    export.add_argument("--proj", required=True, help="i,j: 1-based components or column names")
    export.add_argument("--out", type=Path)
    export.set_defaults(handler=_cmd_export)

    check = sub.add_parser("verify", help="residual of a solution file under a stage's system")
    check.add_argument("file", type=Path)
    check.add_argument("--config", required=True)
    check.add_argument("--stage", required=True, choices=STAGES)
    check.add_argument("--tol", type=float, default=1e-8)
    check.set_defaults(handler=_cmd_verify)
    return parser


# ------------------------------------------------------------------
# Main
# ------------------------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    settings = load_settings()
    _configure_logging(settings.log_level)
    try:
        return args.handler(args, settings)
    except PointCycleError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
