"""Runtime settings loaded from environment variables."""

from __future__ import annotations

import os
import logging
from dataclasses import dataclass, field
from pathlib import Path

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

# Load .env from project root (two levels up from this file)
_PROJECT_ROOT = Path(__file__).resolve().parent.parent.parent
_ENV_PATH = _PROJECT_ROOT / ".env"

load_dotenv(_ENV_PATH)


def _get_env(key: str, *, default: str | None = None, required: bool = False) -> str:
    """Retrieve an environment variable with validation."""
    value = os.getenv(key, default)
    if required and not value:
        raise EnvironmentError(
            f"Required environment variable '{key}' is not set. "
            f"Check your .env file at {_ENV_PATH}"
        )
    return value  # type: ignore[return-value]


@dataclass(frozen=True, slots=True)
class Settings:
    """Immutable solver and output settings."""

    # Overrides the output directory named in a run configuration
    output_dir: str = ""

    log_level: str = "INFO"

    # Collocation discretization: intervals and Gauss points per interval
    ntst: int = 40
    ncol: int = 4

    # Newton corrector
    newton_tol: float = 1e-9
    newton_max_iter: int = 10

    # Default cap on continuation steps per run
    max_steps: int = 200

    project_root: Path = field(default=_PROJECT_ROOT)

    @property
    def output_override(self) -> Path | None:
        """Absolute output directory from the environment, or None."""
        if not self.output_dir:
            return None
        path = Path(self.output_dir)
        return path if path.is_absolute() else self.project_root / path

    @property
    def configs_path(self) -> Path:
        return self.project_root / "data" / "configs"


def load_settings() -> Settings:
    """Build Settings from environment variables."""
    return Settings(
        output_dir=_get_env("POINTCYCLE_OUTPUT_DIR", default=""),
        log_level=_get_env("POINTCYCLE_LOG_LEVEL", default="INFO"),
        ntst=int(_get_env("POINTCYCLE_NTST", default="40")),
        ncol=int(_get_env("POINTCYCLE_NCOL", default="4")),
        newton_tol=float(_get_env("POINTCYCLE_NEWTON_TOL", default="1e-9")),
        newton_max_iter=int(_get_env("POINTCYCLE_NEWTON_MAX_ITER", default="10")),
        max_steps=int(_get_env("POINTCYCLE_MAX_STEPS", default="200")),
    )
