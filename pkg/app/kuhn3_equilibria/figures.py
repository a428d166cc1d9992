from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from tqdm import tqdm

from kuhn3_equilibria.continuation import Branch
from kuhn3_equilibria.game_model import N_DECISION_NODES, build_terms, embed_free, frequency_grid, reach_fractions


logger = logging.getLogger("kuhn3_equilibria.figures")

FRAME_FORMAT = "kuhn3-range-frame v1"
FRAME_COLUMNS = ("node", "card", "reach_fraction", "aggressive_frequency")

_WIDTH, _HEIGHT = 720, 440
_LEFT, _RIGHT, _TOP, _BOTTOM = 72, 110, 24, 52
_SERIES = (("E1", "#1f77b4"), ("E2", "#d62728"), ("E3", "#2ca02c"))


def _nice_ticks(lo: float, hi: float, target: int = 6) -> list[float]:
    span = hi - lo
    raw = span / max(target - 1, 1)
    magnitude = 10.0 ** math.floor(math.log10(raw))
    step = next(m * magnitude for m in (1.0, 2.0, 2.5, 5.0, 10.0) if m * magnitude >= raw)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    value = start
    while value <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(value) < 1e-12 * step else value)
        value += step
    return ticks


def _padded(lo: float, hi: float) -> tuple[float, float]:
    if hi - lo < 1e-12:
        return lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def emit_expectation_plot(branch: Branch, path: str | Path, log_p: bool = False) -> Path:
    """Standalone SVG of E1, E2, E3 against P, points joined in trace order."""
    if len(branch) == 0:
        raise ValueError("cannot plot an empty branch")
    pots = branch.pots()
    expectations = branch.expectations()
    if log_p:
        keep = pots > 0.0
        dropped = int(np.count_nonzero(~keep))
        if dropped:
            logger.warning("dropped %d points with P <= 0 from the log axis", dropped)
        if not keep.any():
            raise ValueError("no points with P > 0 to draw on a log axis")
        pots, expectations = pots[keep], expectations[keep]
        xs = np.log10(pots)
    else:
        xs = pots

    x_lo, x_hi = _padded(float(xs.min()), float(xs.max()))
    y_lo, y_hi = _padded(min(float(expectations.min()), 0.0), max(float(expectations.max()), 0.0))
    plot_w = _WIDTH - _LEFT - _RIGHT
    plot_h = _HEIGHT - _TOP - _BOTTOM

    def sx(v: float) -> float:
        return _LEFT + (v - x_lo) / (x_hi - x_lo) * plot_w

    def sy(v: float) -> float:
        return _TOP + (y_hi - v) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<line x1="{_LEFT}" y1="{_TOP + plot_h}" x2="{_LEFT + plot_w}" y2="{_TOP + plot_h}" stroke="black"/>',
        f'<line x1="{_LEFT}" y1="{_TOP}" x2="{_LEFT}" y2="{_TOP + plot_h}" stroke="black"/>',
    ]

    if log_p:
        x_ticks = [float(k) for k in range(math.ceil(x_lo), math.floor(x_hi) + 1)] or [float(round(xs[0]))]
        x_labels = [f"1e{int(k)}" for k in x_ticks]
    else:
        x_ticks = _nice_ticks(x_lo, x_hi)
        x_labels = [f"{t:g}" for t in x_ticks]
    for tick, label in zip(x_ticks, x_labels):
        if not x_lo <= tick <= x_hi:
            continue
        x = sx(tick)
        parts.append(f'<line x1="{x:.2f}" y1="{_TOP + plot_h}" x2="{x:.2f}" y2="{_TOP + plot_h + 5}" stroke="black"/>')
        parts.append(f'<text x="{x:.2f}" y="{_TOP + plot_h + 18}" text-anchor="middle">{escape(label)}</text>')
    for tick in _nice_ticks(y_lo, y_hi):
        y = sy(tick)
        parts.append(f'<line x1="{_LEFT - 5}" y1="{y:.2f}" x2="{_LEFT}" y2="{y:.2f}" stroke="black"/>')
        parts.append(f'<text x="{_LEFT - 8}" y="{y + 4:.2f}" text-anchor="end">{tick:g}</text>')

    x_title = "P (log scale)" if log_p else "P"
    parts.append(f'<text x="{_LEFT + plot_w / 2:.2f}" y="{_HEIGHT - 12}" text-anchor="middle">{x_title}</text>')
    parts.append(
        f'<text x="16" y="{_TOP + plot_h / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {_TOP + plot_h / 2:.2f})">expectation</text>'
    )

    for k, (name, color) in enumerate(_SERIES):
        coords = " ".join(f"{sx(float(x)):.2f},{sy(float(e)):.2f}" for x, e in zip(xs, expectations[:, k]))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        legend_y = _TOP + 16 + 18 * k
        legend_x = _LEFT + plot_w + 16
        parts.append(
            f'<line x1="{legend_x}" y1="{legend_y}" x2="{legend_x + 24}" y2="{legend_y}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(f'<text x="{legend_x + 30}" y="{legend_y + 4}">{name}</text>')
    parts.append("</svg>")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    logger.info("wrote %s points=%d log_p=%s", path, len(xs), log_p)
    return path


def resample_equal_arc(branch: Branch, arc_step: float) -> tuple[np.ndarray, np.ndarray]:
    """States at equal chord-length spacing, by linear interpolation."""
    if not arc_step > 0.0:
        raise ValueError(f"arc_step must be positive, got {arc_step!r}")
    states = branch.states()
    arclen = branch.arclength()
    targets = np.arange(0.0, arclen[-1] + 0.5 * arc_step, arc_step)
    targets = targets[targets <= arclen[-1]]
    resampled = np.column_stack([np.interp(targets, arclen, states[:, j]) for j in range(states.shape[1])])
    return targets, resampled


def emit_range_frames(
    branch: Branch,
    path: str | Path,
    stride: int = 1,
    arc_step: float | None = None,
    show_progress: bool = False,
) -> list[Path]:
    """One CSV per selected branch point with reach and aggressive frequency per (node, card)."""
    if len(branch) == 0:
        raise ValueError("cannot emit frames for an empty branch")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride!r}")
    if arc_step is None:
        arclen, states = branch.arclength(), branch.states()
    else:
        arclen, states = resample_equal_arc(branch, arc_step)

    terms = build_terms(branch.game_spec)
    n_cards = branch.game_spec.n_cards
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)

    written: list[Path] = []
    selected = range(0, len(states), stride)
    for frame, step in enumerate(tqdm(selected, desc="frames", disable=not show_progress)):
        X = states[step]
        x = embed_free(terms, X[:-1])
        reach = reach_fractions(n_cards, x)
        aggressive = frequency_grid(n_cards, x)
        target = out_dir / f"frame_{frame:05d}.csv"
        with target.open("w", encoding="utf-8", newline="") as fh:
            fh.write(
                f"# {FRAME_FORMAT} step={step} arclen={arclen[step]:.17g} P={X[-1]:.17g} reach=conditional\n"
            )
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(FRAME_COLUMNS)
            for node in range(N_DECISION_NODES):
                for card in range(n_cards):
                    writer.writerow(
                        [node + 1, card + 1, format(reach[node, card], ".17g"), format(aggressive[node, card], ".17g")]
                    )
        written.append(target)
    logger.info("wrote %d frames to %s", len(written), out_dir)
    return written
