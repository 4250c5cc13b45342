"""Tests for the command-line entry point in main.py."""

from __future__ import annotations

import json
from pathlib import Path
from unittest.mock import patch

import pytest

from main import _build_parser, main
from pointcycle.bvp.io import save_solution

from tests.conftest import LORENZ_CONFIG, LORENZ_LAMBDA_U

EQUILIBRIUM_ONLY = LORENZ_CONFIG.replace(
    "stages = equilibrium, hopf-cycle, eigenfunction", "stages = equilibrium"
)


@pytest.fixture()
def patched_settings(settings):
    with patch("main.load_settings", return_value=settings):
        yield settings


class TestParser:

    def test_run_defaults(self) -> None:
        args = _build_parser().parse_args(["run", "lorenz"])
        assert args.config == "lorenz"
        assert args.stage is None
        assert args.restart is None

    def test_rejects_unknown_stage(self) -> None:
        with pytest.raises(SystemExit):
            _build_parser().parse_args(["run", "lorenz", "--stage", "plot"])

    def test_export_needs_projection(self) -> None:
        with pytest.raises(SystemExit):
            _build_parser().parse_args(["export", "cycle.sol"])

    def test_verify_tolerance(self) -> None:
        args = _build_parser().parse_args(
            ["verify", "x.sol", "--config", "lorenz", "--stage", "equilibrium", "--tol", "1e-6"]
        )
        assert args.tol == 1e-6
        assert args.file == Path("x.sol")


class TestCommands:

    def test_run_single_stage(self, patched_settings, write_config, capsys) -> None:
        path = write_config(EQUILIBRIUM_ONLY)
        assert main(["run", str(path), "--stage", "equilibrium"]) == 0
        assert '"lambda_eq"' in capsys.readouterr().out
        assert (path.parent / "out" / "equilibrium.final.sol").exists()

    def test_run_all_writes_summary(self, patched_settings, write_config) -> None:
        path = write_config(EQUILIBRIUM_ONLY)
        assert main(["run", str(path)]) == 0
        summary = json.loads((path.parent / "out" / "summary.json").read_text(encoding="utf-8"))
        lam = summary["stages"]["equilibrium"]["scalars"]["lambda_eq"]
        assert lam == pytest.approx(LORENZ_LAMBDA_U, rel=1e-9)

    def test_restart_needs_stage(self, patched_settings, write_config) -> None:
        path = write_config(EQUILIBRIUM_ONLY)
        assert main(["run", str(path), "--restart", "3"]) == 1

    def test_missing_config(self, patched_settings, tmp_path) -> None:
        assert main(["run", str(tmp_path / "absent.ini")]) == 1

    def test_export(self, patched_settings, circle_solution, tmp_path, capsys) -> None:
        path = save_solution(circle_solution, tmp_path / "cycle.final.sol")
        assert main(["export", str(path), "--proj", "1,3"]) == 0
        assert (tmp_path / "cycle.final.x1_x3.dat").exists()
        assert "cycle.final.x1_x3.dat" in capsys.readouterr().out

    def test_export_bad_projection(self, patched_settings, circle_solution, tmp_path) -> None:
        path = save_solution(circle_solution, tmp_path / "cycle.final.sol")
        assert main(["export", str(path), "--proj", "1,7"]) == 1

    def test_verify(self, patched_settings, write_config) -> None:
        path = write_config(EQUILIBRIUM_ONLY)
        assert main(["run", str(path), "--stage", "equilibrium"]) == 0
        solution = path.parent / "out" / "equilibrium.final.sol"
        args = ["verify", str(solution), "--config", str(path), "--stage", "equilibrium"]
        assert main(args) == 0
        assert main([*args, "--tol", "-1"]) == 1
