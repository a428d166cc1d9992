"""
Launch long large-N branch traces one deck size after another.

Notes:
- Each deck size goes through the same `trace` command as the CLI and lands in its own
  directory `<KUHN3_OUTPUT_DIR>/n<N>/` (branch.csv + branch.meta.json).
- These runs take hours to days; a failed size is logged and the sweep moves on.

Environment variables:
- KUHN3_SWEEP_CARDS: comma-separated deck sizes, default "14,18,22,26"
- KUHN3_SWEEP_POT_MAX: stop pot, default 1000
- KUHN3_SWEEP_EPSILON: regularization parameter, default 1e-6
- KUHN3_SWEEP_SEED: bootstrap seed, default 0
- KUHN3_OUTPUT_DIR: parent output directory, default ./runs
- KUHN3_STEP_BUDGET: per-size step budget, default 200000
"""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "app"))

from kuhn3_equilibria.cli import EXIT_OK, run_cli  # noqa: E402
from kuhn3_equilibria.settings import Settings, _env_float, _env_int  # noqa: E402


logger = logging.getLogger("kuhn3_equilibria.sweep")


def _parse_cards(value: str | None) -> list[int]:
    if not value:
        return [14, 18, 22, 26]
    cards = [int(part) for part in value.split(",") if part.strip()]
    if not cards:
        raise ValueError(f"Unsupported KUHN3_SWEEP_CARDS: {value!r}")
    return cards


def main() -> int:
    settings = Settings.load()
    cards = _parse_cards(os.getenv("KUHN3_SWEEP_CARDS"))
    pot_max = _env_float(os.getenv("KUHN3_SWEEP_POT_MAX"), 1000.0)
    epsilon = _env_float(os.getenv("KUHN3_SWEEP_EPSILON"), 1e-6)
    seed = _env_int(os.getenv("KUHN3_SWEEP_SEED"), 0)

    failures = []
    for n_cards in cards:
        out_dir = settings.output_dir / f"n{n_cards}"
        argv = [
            "trace",
            "--cards", str(n_cards),
            "--pot-max", repr(pot_max),
            "--epsilon", repr(epsilon),
            "--seed", str(seed),
            "--step-budget", str(settings.step_budget),
            "--out", str(out_dir),
        ]  # fmt: skip
        code = run_cli(argv)
        if code != EXIT_OK:
            logger.error("sweep n_cards=%d exited with %d", n_cards, code)
            failures.append(n_cards)
    if failures:
        logger.error("failed deck sizes: %s", ", ".join(map(str, failures)))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
