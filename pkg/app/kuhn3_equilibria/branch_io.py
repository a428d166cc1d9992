from __future__ import annotations

import csv
import logging
import re
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from kuhn3_equilibria.continuation import Branch, BranchPoint, ContinuationConfig
from kuhn3_equilibria.game_model import SKP_CARDS, GameSpec, column_name, freq_index


logger = logging.getLogger("kuhn3_equilibria.branch_io")

FORMAT_NAME = "kuhn3-branch"
FORMAT_VERSION = 1
FIXED_COLUMNS: tuple[str, ...] = ("step", "arclen", "P", "delta", "E1", "E2", "E3")

_COLUMN_RE = re.compile(r"^p([123])_n(\d+)_c(\d+)$")


class BranchMeta(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: Literal["kuhn3-branch"] = Field(default=FORMAT_NAME, description="File family tag.")
    version: int = Field(default=FORMAT_VERSION, description="Column layout version.")
    n_cards: int = Field(ge=4)
    variant: Literal["standard", "skp"] = "standard"
    dominance_fixing: bool = True
    epsilon: float = Field(gt=0.0)
    termination: str = "running"
    points: int = Field(ge=0)
    config: dict[str, bool | int | float] = Field(default_factory=dict, description="Continuation settings.")


def meta_path(csv_path: str | Path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".meta.json")


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def branch_header(branch: Branch) -> list[str]:
    return [*FIXED_COLUMNS, *(column_name(l, branch.game_spec.n_cards) for l in branch.free_indices)]


def export_branch_csv(branch: Branch, path: str | Path, write_meta: bool = True) -> Path:
    if len(branch) == 0:
        raise ValueError("cannot export an empty branch")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arclen = branch.arclength()

    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(branch_header(branch))
        for step, (point, s) in enumerate(zip(branch.points, arclen)):
            writer.writerow(
                [
                    str(step),
                    _fmt(s),
                    _fmt(point.pot),
                    _fmt(point.delta_used),
                    *(_fmt(e) for e in point.expectations),
                    *(_fmt(v) for v in point.x_free),
                ]
            )

    if write_meta:
        meta = BranchMeta(
            n_cards=branch.game_spec.n_cards,
            variant=branch.game_spec.variant,
            dominance_fixing=branch.game_spec.dominance_fixing,
            epsilon=branch.epsilon,
            termination=branch.termination,
            points=len(branch),
            config=branch.config.to_dict(),
        )
        meta_path(path).write_text(meta.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info("wrote %s points=%d columns=%d", path, len(branch), len(FIXED_COLUMNS) + len(branch.free_indices))
    return path


def _parse_free_columns(columns: list[str]) -> tuple[list[int], int]:
    labels = []
    for name in columns:
        match = _COLUMN_RE.match(name)
        if match is None:
            raise ValueError(f"unexpected column {name!r}")
        labels.append(tuple(int(g) for g in match.groups()))
    n_cards = max((card for _, _, card in labels), default=0)
    return [freq_index(player, node, card, n_cards) for player, node, card in labels], n_cards


def _infer_spec(n_cards: int, n_free: int) -> GameSpec:
    if n_free == 12 * n_cards - 22:
        return GameSpec(n_cards=n_cards)
    if n_free == 12 * n_cards:
        return GameSpec(n_cards=n_cards, dominance_fixing=False)
    if n_cards == SKP_CARDS and n_free == 11:
        return GameSpec(n_cards=n_cards, variant="skp")
    raise ValueError(f"cannot infer the game from {n_free} frequency columns with {n_cards} cards")


def load_branch_csv(path: str | Path) -> Branch:
    """Read a branch written by :func:`export_branch_csv`; the sidecar is optional."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if tuple(header[: len(FIXED_COLUMNS)]) != FIXED_COLUMNS:
        raise ValueError(f"{path} does not start with columns {','.join(FIXED_COLUMNS)}")
    free_indices, n_cards = _parse_free_columns(header[len(FIXED_COLUMNS) :])

    sidecar = meta_path(path)
    if sidecar.exists():
        meta = BranchMeta.model_validate_json(sidecar.read_text(encoding="utf-8"))
        spec = GameSpec(n_cards=meta.n_cards, variant=meta.variant, dominance_fixing=meta.dominance_fixing)
        config = ContinuationConfig(**meta.config)
        epsilon, termination = meta.epsilon, meta.termination
    else:
        logger.warning("no metadata next to %s; inferring the game from the columns", path)
        spec = _infer_spec(n_cards, len(free_indices))
        config = ContinuationConfig()
        epsilon, termination = config.epsilon_target, "running"

    branch = Branch(
        game_spec=spec,
        epsilon=epsilon,
        config=config,
        free_indices=tuple(free_indices),
        termination=termination,  # type: ignore[arg-type]
    )
    for line_no, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
        values = np.array([float(v) for v in row[1:]])
        pot, delta = values[1], values[2]
        expectations = values[3:6]
        x_free = values[6:]
        branch.points.append(BranchPoint(X=np.append(x_free, pot), expectations=expectations, delta_used=float(delta)))
    return branch
