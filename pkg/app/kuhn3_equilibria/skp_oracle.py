"""Closed forms for the simplified four-card game.

The simplified game is the N = 4 game with every card-1 frequency forced to
zero. Its eleven free frequencies are ordered

    (c2, d3, b1, a1, c3, d1, b2, a2, c1, d2, b3)

where ``a`` are value bets with card 4, ``b`` bluffs with card 2, and ``c``/``d``
calls with card 3. Row ``k`` of :func:`skp_f` is the equilibrium gradient of
unknown ``k``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import bisect

from kuhn3_equilibria.continuation import Branch
from kuhn3_equilibria.equilibrium_system import K_MINUS, K_PLUS, EquilibriumSystem, g_eval, g_inverse, system_for
from kuhn3_equilibria.errors import SolverError
from kuhn3_equilibria.game_model import SKP_CARDS, build_terms, freq_index


logger = logging.getLogger("kuhn3_equilibria.skp_oracle")

SKP_UNKNOWNS: tuple[str, ...] = ("c2", "d3", "b1", "a1", "c3", "d1", "b2", "a2", "c1", "d2", "b3")
SKP_TREE_ENTRIES: dict[str, tuple[int, int, int]] = {
    "c2": (2, 10, 3),
    "d3": (3, 11, 3),
    "b1": (1, 1, 2),
    "a1": (1, 1, 4),
    "c3": (3, 7, 3),
    "d1": (1, 8, 3),
    "b2": (2, 2, 2),
    "a2": (2, 2, 4),
    "c1": (1, 4, 3),
    "d2": (2, 5, 3),
    "b3": (3, 3, 2),
}
SOLUTION1_ZEROS: tuple[str, ...] = ("b1", "a1", "b2", "a2", "c1")
BRACKET_MARGIN = 1e-9

_POS = {name: i for i, name in enumerate(SKP_UNKNOWNS)}


@dataclass(frozen=True)
class SKPState:
    values: tuple[float, ...]
    pot: float

    def __post_init__(self) -> None:
        if len(self.values) != len(SKP_UNKNOWNS):
            raise ValueError(f"Expected {len(SKP_UNKNOWNS)} values, got {len(self.values)}")
        for name, value in zip(SKP_UNKNOWNS, self.values):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value!r} is outside [0, 1]")
        if not self.pot >= 0.0:
            raise ValueError(f"pot must be >= 0, got {self.pot!r}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, float], pot: float) -> "SKPState":
        return cls(tuple(float(values.get(name, 0.0)) for name in SKP_UNKNOWNS), pot)

    def __getitem__(self, name: str) -> float:
        return self.values[_POS[name]]

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)


@dataclass(frozen=True)
class SKPSolution1:
    pot: float
    b3: float
    d2: float
    lower: float
    upper: float


def skp_f(state: SKPState) -> np.ndarray:
    P = state.pot
    c2, d3, b1, a1, c3, d1, b2, a2, c1, d2, b3 = state.values
    return np.array(
        [
            P * b1 - 2 * a1,
            (P + 1) * b1 - 2 * a1,
            2 * P - 4 - (P + 1) * (c2 + d3),
            c2 + d3 - b3 - (1 + 0.5 * c3) * b2,
            (P + a1) * b2 + (b1 - 2) * a2,
            (P + 1) * b2 - 2 * a2,
            2 * P - 4 + 2 * a1 - (P + 1) * (c3 + d1),
            c3 + d1 - 0.5 * c3 * b1 - (1 + 0.5 * c1) * b3,
            (P + a2) * b3 + b2 - 2,
            (P + 1) * b3 + b1 - 2,
            2 * P - 4 + 2 * a1 + 2 * a2 - (P + 1) * (c1 + d2),
        ]
    )


def solution1_closed_form(P: float) -> SKPSolution1:
    if not 2.0 <= P <= 3.0:
        raise ValueError(f"Solution 1 exists only for 2 <= P <= 3, got P={P!r}")
    lower = (2 * P - 4) / (P + 1)
    upper = 2 / (P + 1)
    return SKPSolution1(pot=P, b3=upper, d2=lower, lower=lower, upper=upper)


def skp_solution1(P: float, interior_sums: tuple[float, float] | None = None) -> SKPState:
    """Solution 1 state; each interior sum is split evenly between its two calls."""
    closed = solution1_closed_form(P)
    if interior_sums is None:
        mid = 0.5 * (closed.lower + closed.upper)
        interior_sums = (mid, mid)
    for total in interior_sums:
        if not closed.lower - 1e-12 <= total <= closed.upper + 1e-12:
            raise ValueError(f"interior sum {total!r} is outside [{closed.lower}, {closed.upper}] at P={P}")
    first, second = interior_sums
    return SKPState.from_mapping(
        {
            "c2": first / 2,
            "d3": first / 2,
            "c3": second / 2,
            "d1": second / 2,
            "d2": closed.d2,
            "b3": closed.b3,
        },
        P,
    )


def _scales(row_scales: Sequence[float] | None) -> np.ndarray:
    if row_scales is None:
        return np.ones(len(SKP_UNKNOWNS))
    scales = np.asarray(row_scales, dtype=np.float64)
    if scales.shape != (len(SKP_UNKNOWNS),) or np.any(scales <= 0.0):
        raise ValueError("row_scales must be eleven positive numbers")
    return scales


def _block_scales(scales: np.ndarray, block: int) -> np.ndarray:
    if block == 1:
        return scales[0:4]
    if block == 2:
        return scales[4:8]
    raise ValueError(f"block must be 1 or 2, got {block!r}")


def _check_open_pot(P: float) -> tuple[float, float]:
    if not 2.0 < P < 3.0:
        raise ValueError(f"expected 2 < P < 3, got P={P!r}")
    return (2 * P - 4) / (P + 1), 2 / (P + 1)


def skp_fixed_point_map(
    X: float,
    P: float,
    k_minus: float = K_MINUS,
    row_scales: Sequence[float] | None = None,
    block: int = 1,
) -> float:
    """F(X): the interior sum implied by the leading boundary corrections."""
    lower, upper = _check_open_pot(P)
    s_call, s_overcall, s_bluff, s_value = _block_scales(_scales(row_scales), block)
    bluff = k_minus / (s_bluff * (X - lower))
    value = k_minus / (s_value * (upper - X))
    first = s_call * (P * bluff / (P + 1) - 2 * value)
    second = s_overcall * (bluff - 2 * value)
    return float(g_eval(first) + g_eval(second))


def skp_limit_X(
    P: float,
    k_minus: float = K_MINUS,
    row_scales: Sequence[float] | None = None,
    block: int = 1,
    xtol: float = 1e-16,
) -> float:
    """Root of X = F(X) inside the Solution 1 bounds."""
    if not k_minus > 0.0:
        raise ValueError(f"k_minus must be positive, got {k_minus!r}")
    lower, upper = _check_open_pot(P)

    def excess(X: float) -> float:
        return X - skp_fixed_point_map(X, P, k_minus, row_scales, block)

    a, b = lower + BRACKET_MARGIN, upper - BRACKET_MARGIN
    fa, fb = excess(a), excess(b)
    if fa * fb > 0.0:
        raise SolverError("no sign change in bracket", {"P": P, "low": fa, "high": fb})
    return float(bisect(excess, a, b, xtol=xtol, rtol=1e-15, maxiter=500))


def skp_leading_state(
    P: float,
    k_minus: float = K_MINUS,
    row_scales: Sequence[float] | None = None,
) -> SKPState:
    """Solution 1 with the interior calls the regularization selects as epsilon -> 0."""
    closed = solution1_closed_form(P)
    scales = _scales(row_scales)
    calls: dict[str, float] = {}
    for block, (call, overcall) in ((1, ("c2", "d3")), (2, ("c3", "d1"))):
        X = skp_limit_X(P, k_minus, row_scales, block)
        s_call, s_overcall, s_bluff, s_value = _block_scales(scales, block)
        bluff = k_minus / (s_bluff * (P + 1) * (X - closed.lower))
        value = k_minus / (s_value * (closed.upper - X))
        calls[call] = float(g_eval(s_call * (P * bluff - 2 * value)))
        calls[overcall] = float(g_eval(s_overcall * ((P + 1) * bluff - 2 * value)))
    return SKPState.from_mapping({**calls, "d2": closed.d2, "b3": closed.b3}, P)


def skp_correction(
    P: float,
    state_hat: SKPState | None = None,
    k_minus: float = K_MINUS,
    k_plus: float = K_PLUS,
    row_scales: Sequence[float] | None = None,
) -> np.ndarray:
    """First-order corrections x_bar in the unknown order; NaN for the interior calls.

    ``k_plus`` never enters: no Solution 1 component sits at one.
    """
    lower, upper = _check_open_pot(P)
    if state_hat is None:
        state_hat = skp_leading_state(P, k_minus, row_scales)
    scales = _scales(row_scales)
    sums = (state_hat["c2"] + state_hat["d3"], state_hat["c3"] + state_hat["d1"])
    for total in sums:
        if not lower < total < upper:
            raise ValueError(f"interior sum {total!r} sits on a bound of ({lower}, {upper})")

    out = np.full(len(SKP_UNKNOWNS), np.nan)
    out[_POS["b1"]] = k_minus / (scales[_POS["b1"]] * (P + 1) * (sums[0] - lower))
    out[_POS["a1"]] = k_minus / (scales[_POS["a1"]] * (upper - sums[0]))
    out[_POS["b2"]] = k_minus / (scales[_POS["b2"]] * (P + 1) * (sums[1] - lower))
    out[_POS["a2"]] = k_minus / (scales[_POS["a2"]] * (upper - sums[1]))
    out[_POS["c1"]] = k_minus * (P + 1) / (2 * scales[_POS["c1"]])
    out[_POS["b3"]] = (g_inverse(state_hat["d2"]) / scales[_POS["d2"]] - out[_POS["b1"]]) / (P + 1)
    out[_POS["d2"]] = (
        2 * out[_POS["a1"]]
        + 2 * out[_POS["a2"]]
        - (P + 1) * out[_POS["c1"]]
        - g_inverse(state_hat["b3"]) / scales[_POS["b3"]]
    ) / (P + 1)
    return out


def skp_regularized_guess(
    P: float,
    epsilon: float,
    k_minus: float = K_MINUS,
    row_scales: Sequence[float] | None = None,
) -> SKPState:
    """Leading state plus epsilon times the first-order corrections."""
    state_hat = skp_leading_state(P, k_minus, row_scales)
    corrections = skp_correction(P, state_hat, k_minus, row_scales=row_scales)
    values = state_hat.as_array() + epsilon * np.nan_to_num(corrections, nan=0.0)
    return SKPState(tuple(float(v) for v in np.clip(values, 0.0, 1.0)), P)


def skp_positions(free_indices: Sequence[int]) -> np.ndarray:
    """Rows of the SKP unknowns inside a free-index list of the four-card game."""
    lookup = {int(l): row for row, l in enumerate(free_indices)}
    rows = []
    for name in SKP_UNKNOWNS:
        flat = freq_index(*SKP_TREE_ENTRIES[name], SKP_CARDS)
        if flat not in lookup:
            raise ValueError(f"{name} (flat index {flat}) is not a free frequency")
        rows.append(lookup[flat])
    return np.array(rows, dtype=np.int64)


def embed_skp(state: SKPState, free_indices: Sequence[int]) -> np.ndarray:
    """Free vector of the four-card game with non-SKP free entries at zero."""
    x_free = np.zeros(len(free_indices))
    x_free[skp_positions(free_indices)] = state.as_array()
    return x_free


def extract_skp(x_free: np.ndarray, free_indices: Sequence[int]) -> np.ndarray:
    return np.asarray(x_free, dtype=np.float64)[skp_positions(free_indices)]


def skp_row_scales(system: EquilibriumSystem, pot: float = 2.5, seed: int = 0, samples: int = 3) -> np.ndarray:
    """Positive factor between each tree-derived row and its closed-form row."""
    rows = skp_positions(system.free_indices)
    rng = np.random.default_rng(seed)
    ratios = []
    while len(ratios) < samples:
        state = SKPState(tuple(rng.uniform(0.1, 0.9, len(SKP_UNKNOWNS))), pot)
        closed = skp_f(state)
        if np.min(np.abs(closed)) < 1e-2:
            continue
        x = system.embed(embed_skp(state, system.free_indices))
        ratios.append(system.assemble_f(x, pot)[rows] / closed)
    ratios_arr = np.array(ratios)
    scales = np.median(ratios_arr, axis=0)
    spread = float(np.max(np.abs(ratios_arr - scales) / np.abs(scales)))
    if spread > 1e-8:
        logger.warning("row scales vary across samples spread=%.2e", spread)
    if np.any(scales <= 0.0):
        raise SolverError("tree rows and closed-form rows disagree in sign", {"scales": scales.round(6).tolist()})
    logger.debug("row scales %s", np.array2string(scales, precision=6))
    return scales


@dataclass(frozen=True)
class SKPPointCheck:
    step: int
    pot: float
    b3_error: float
    d2_error: float
    bound_excess: float
    limit_error: float
    zero_max: float
    passed: bool


@dataclass(frozen=True)
class SKPComparison:
    tolerance: float
    row_scales: np.ndarray
    points: tuple[SKPPointCheck, ...]

    @property
    def n_checked(self) -> int:
        return len(self.points)

    @property
    def passed(self) -> bool:
        return bool(self.points) and all(p.passed for p in self.points)

    def max_deviation(self, field_name: str) -> float:
        return max((float(getattr(p, field_name)) for p in self.points), default=0.0)


def compare_embedding(
    branch: Branch,
    tolerance: float = 1e-3,
    row_scales: Sequence[float] | None = None,
    p_window: tuple[float, float] = (2.0, 3.0),
    first_pass_only: bool = True,
) -> SKPComparison:
    """Check every branch point with P in ``p_window`` against Solution 1."""
    if branch.game_spec.n_cards != SKP_CARDS:
        raise ValueError(f"expected a {SKP_CARDS}-card branch, got n_cards={branch.game_spec.n_cards}")
    rows = skp_positions(branch.free_indices)
    if row_scales is None:
        system = system_for(build_terms(branch.game_spec), branch.config.ancestor_rule)
        row_scales = skp_row_scales(system)
    scales = _scales(row_scales)

    pots = branch.pots()
    last = len(pots)
    if first_pass_only:
        beyond = np.flatnonzero(pots > p_window[1])
        if beyond.size:
            last = int(beyond[0])

    checks: list[SKPPointCheck] = []
    for step in range(last):
        P = float(pots[step])
        if not p_window[0] <= P <= p_window[1]:
            continue
        values = branch.points[step].x_free[rows]
        state = dict(zip(SKP_UNKNOWNS, values))
        closed = solution1_closed_form(P)
        sums = (state["c2"] + state["d3"], state["c3"] + state["d1"])
        bound_excess = max(max(closed.lower - s, s - closed.upper, 0.0) for s in sums)

        limit_error = 0.0
        slack = np.zeros(len(SKP_UNKNOWNS))
        if 2.0 < P < 3.0:
            limit_error = max(
                abs(sums[0] - skp_limit_X(P, row_scales=scales, block=1)),
                abs(sums[1] - skp_limit_X(P, row_scales=scales, block=2)),
            )
            corrections = skp_correction(P, row_scales=scales)
            slack = 2.0 * branch.epsilon * np.abs(np.nan_to_num(corrections, nan=0.0))

        zero_max = max(abs(state[name]) - slack[_POS[name]] for name in SOLUTION1_ZEROS)
        b3_error = max(abs(state["b3"] - closed.b3) - slack[_POS["b3"]], 0.0)
        d2_error = max(abs(state["d2"] - closed.d2) - slack[_POS["d2"]], 0.0)
        passed = max(b3_error, d2_error, bound_excess, limit_error, zero_max) <= tolerance
        checks.append(
            SKPPointCheck(
                step=step,
                pot=P,
                b3_error=b3_error,
                d2_error=d2_error,
                bound_excess=bound_excess,
                limit_error=limit_error,
                zero_max=zero_max,
                passed=passed,
            )
        )
    comparison = SKPComparison(tolerance=tolerance, row_scales=scales, points=tuple(checks))
    logger.info(
        "compared %d points with Solution 1 passed=%s max_b3=%.2e max_limit=%.2e",
        comparison.n_checked,
        comparison.passed,
        comparison.max_deviation("b3_error"),
        comparison.max_deviation("limit_error"),
    )
    return comparison
