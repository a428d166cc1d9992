from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path


def _env_bool(value: str | None, default: bool) -> bool:
    if value is None:
        return default
    return value.strip().lower() in {"1", "true", "yes", "y", "on"}


def _env_int(value: str | None, default: int) -> int:
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        return default


def _env_float(value: str | None, default: float) -> float:
    if value is None:
        return default
    try:
        return float(value)
    except ValueError:
        return default


def _normalize_log_level(value: str | None, default: str) -> str:
    if value is None:
        return default
    v = value.strip().upper()
    if v in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
        return v
    if v == "WARN":
        return "WARNING"
    return default


def configure_logging(level: str) -> None:
    if not logging.getLogger().handlers:
        logging.basicConfig(
            level=getattr(logging, level, logging.INFO),
            format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        )
    else:
        logging.getLogger().setLevel(getattr(logging, level, logging.INFO))


@dataclass(frozen=True)
class Settings:
    output_dir: Path
    log_level: str
    show_progress: bool
    step_budget: int
    run_slow_tests: bool

    @staticmethod
    def load() -> "Settings":
        output_dir = Path(os.environ.get("KUHN3_OUTPUT_DIR", "runs")).resolve()
        log_level = _normalize_log_level(os.environ.get("KUHN3_LOG_LEVEL"), "INFO")
        show_progress = _env_bool(os.environ.get("KUHN3_SHOW_PROGRESS"), True)
        step_budget = max(1, _env_int(os.environ.get("KUHN3_STEP_BUDGET"), 200_000))
        run_slow_tests = _env_bool(os.environ.get("KUHN3_RUN_SLOW_TESTS"), False)

        return Settings(
            output_dir=output_dir,
            log_level=log_level,
            show_progress=show_progress,
            step_budget=step_budget,
            run_slow_tests=run_slow_tests,
        )
