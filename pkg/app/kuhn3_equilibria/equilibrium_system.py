from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np

from kuhn3_equilibria.game_model import (
    MAX_PATH_LENGTH,
    NODE_PLAYER,
    PLAYER_NODES,
    GameTerms,
    build_topology,
    embed_free,
    flat_label,
    freq_index,
    node_slot,
    path_probability,
    payoff_slopes,
    payoff_weights,
    term_factors,
    terminal_payoff_table,
)


logger = logging.getLogger("kuhn3_equilibria.equilibrium_system")

K_PLUS = 1.0 / np.pi
K_MINUS = 1.0 / np.pi

Classification = Literal["interior", "at-0", "at-1"]

_PAIRS = tuple(itertools.combinations(range(MAX_PATH_LENGTH), 2))


def g_eval(y: np.ndarray | float) -> np.ndarray | float:
    return 0.5 + np.arctan(y) / np.pi


def g_prime(y: np.ndarray | float) -> np.ndarray | float:
    y = np.asarray(y, dtype=np.float64)
    out = 1.0 / (np.pi * (1.0 + y * y))
    return float(out) if out.ndim == 0 else out


def g_inverse(p: np.ndarray | float) -> np.ndarray | float:
    arr = np.asarray(p, dtype=np.float64)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise ValueError(f"g_inverse is defined on (0, 1), got {p!r}")
    out = np.tan(np.pi * (arr - 0.5))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RegularizationFn:
    """x = g(f / epsilon) with g(y) = 1/2 + arctan(y) / pi."""

    epsilon: float
    k_plus: float = K_PLUS
    k_minus: float = K_MINUS

    def __post_init__(self) -> None:
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon!r}")

    def value(self, f: np.ndarray) -> np.ndarray:
        return g_eval(np.asarray(f) / self.epsilon)

    def slope(self, f: np.ndarray) -> np.ndarray:
        """d/df of g(f / epsilon)."""
        return g_prime(np.asarray(f) / self.epsilon) / self.epsilon


def same_player_passive_ancestor(node_id: int) -> int | None:
    """Earlier node on the path to ``node_id`` where the same player acted, if any."""
    topology = build_topology()
    player = NODE_PLAYER[node_id]
    earlier = [(n, aggressive) for n, aggressive in topology.path_to(node_id) if NODE_PLAYER[n] == player]
    if not earlier:
        return None
    if len(earlier) > 1 or earlier[0][1]:
        raise RuntimeError(f"Node {node_id} has an ancestor chain the subgame rule does not cover")
    return earlier[0][0]


@dataclass(frozen=True)
class Linearization:
    f: np.ndarray
    dfdx: np.ndarray
    dfdp: np.ndarray


class EquilibriumSystem:
    """Residual g(f/eps) - x over the free frequencies, with P as an extra unknown."""

    def __init__(self, terms: GameTerms, ancestor_rule: bool = True) -> None:
        self.terms = terms
        self.ancestor_rule = ancestor_rule
        self.n_cards = terms.n_cards
        self.free_positions = terms.free_positions
        self.free_indices = terms.free_indices
        self._width = terms.n_frequencies + 1

        ancestors = np.full(self.free_positions.size, -1, dtype=np.int64)
        if ancestor_rule:
            for row, pos in enumerate(self.free_positions):
                player, node_id, card = flat_label(int(pos) + 1, self.n_cards)
                ancestor_node = same_player_passive_ancestor(node_id)
                if ancestor_node is not None:
                    ancestors[row] = freq_index(player, ancestor_node, card, self.n_cards) - 1
        self.ancestor_positions = ancestors
        self.ancestor_map: dict[int, int | None] = {
            int(pos) + 1: (int(a) + 1 if a >= 0 else None) for pos, a in zip(self.free_positions, ancestors)
        }
        self._ancestor_rows = ancestors >= 0

        # Term groups sharing one (ancestor slot, descendant slot) pair on their path.
        self._pair_groups: list[tuple[np.ndarray, int, int]] = []
        if ancestor_rule:
            topology = build_topology()
            by_pair: dict[tuple[int, int], list[int]] = {}
            for terminal in topology.terminals:
                nodes = [n for n, _ in terminal.path]
                for q, node_id in enumerate(nodes):
                    ancestor_node = same_player_passive_ancestor(node_id)
                    if ancestor_node is not None:
                        by_pair.setdefault((nodes.index(ancestor_node), q), []).append(terminal.terminal_id)
            for (p, q), terminal_ids in sorted(by_pair.items()):
                rows = np.flatnonzero(np.isin(terms.terminal_ids, terminal_ids))
                self._pair_groups.append((rows, p, q))

    @property
    def size(self) -> int:
        return int(self.free_positions.size)

    def embed(self, x_free: np.ndarray) -> np.ndarray:
        return embed_free(self.terms, x_free)

    def _linearize_full(self, x: np.ndarray, P: float) -> Linearization:
        terms = self.terms
        width = self._width
        factors = term_factors(terms, x)
        signs = np.where(terms.direct, 1.0, -1.0)
        own_w = np.take_along_axis(payoff_weights(terms, P), terms.owner, axis=1)
        own_s = np.take_along_axis(payoff_slopes(terms), terms.owner, axis=1)

        leave_one = np.stack(
            [np.prod(np.delete(factors, j, axis=1), axis=1) for j in range(MAX_PATH_LENGTH)], axis=1
        )
        grad_base = signs * leave_one
        flat_index = terms.index.ravel()
        grad = np.bincount(flat_index, weights=(grad_base * own_w).ravel(), minlength=width)
        grad_p = np.bincount(flat_index, weights=(grad_base * own_s).ravel(), minlength=width)

        keys: list[np.ndarray] = []
        base_w: list[np.ndarray] = []
        base_s: list[np.ndarray] = []
        for j, k in _PAIRS:
            rest = [m for m in range(MAX_PATH_LENGTH) if m not in (j, k)]
            base = signs[:, j] * signs[:, k] * np.prod(factors[:, rest], axis=1)
            for row, col in ((j, k), (k, j)):
                keys.append(terms.index[:, row] * width + terms.index[:, col])
                base_w.append(base * own_w[:, row])
                base_s.append(base * own_s[:, row])
        pair_keys = np.concatenate(keys)
        hess = np.bincount(pair_keys, weights=np.concatenate(base_w), minlength=width * width).reshape(width, width)
        hess_p = np.bincount(pair_keys, weights=np.concatenate(base_s), minlength=width * width).reshape(width, width)

        free = self.free_positions
        f = grad[free].copy()
        dfdx = hess[np.ix_(free, free)].copy()
        dfdp = grad_p[free].copy()

        if self._ancestor_rows.any():
            third = self._third_derivatives(factors, signs, own_w)
            rows = np.flatnonzero(self._ancestor_rows)
            b = free[rows]
            a = self.ancestor_positions[rows]
            f[rows] = -hess[a, b]
            dfdp[rows] = -hess_p[a, b]
            dfdx[rows] = -third[np.ix_(b, free)]
        return Linearization(f=f, dfdx=dfdx, dfdp=dfdp)

    def _third_derivatives(self, factors: np.ndarray, signs: np.ndarray, own_w: np.ndarray) -> np.ndarray:
        """d/dx_l of the ancestor mixed partial, keyed by (descendant position, l)."""
        terms = self.terms
        width = self._width
        keys: list[np.ndarray] = []
        weights: list[np.ndarray] = []
        for rows, p, q in self._pair_groups:
            for m in range(MAX_PATH_LENGTH):
                if m in (p, q):
                    continue
                rest = [c for c in range(MAX_PATH_LENGTH) if c not in (p, q, m)]
                value = (
                    signs[rows, p] * signs[rows, q] * signs[rows, m]
                    * np.prod(factors[np.ix_(rows, rest)], axis=1)
                    * own_w[rows, q]
                )
                keys.append(terms.index[rows, q] * width + terms.index[rows, m])
                weights.append(value)
        if not keys:
            return np.zeros((width, width))
        return np.bincount(
            np.concatenate(keys), weights=np.concatenate(weights), minlength=width * width
        ).reshape(width, width)

    def linearize(self, x_free: np.ndarray, P: float) -> Linearization:
        return self._linearize_full(self.embed(x_free), P)

    def assemble_f(self, x: np.ndarray, P: float) -> np.ndarray:
        """f for every free row, from a full frequency vector."""
        return self._linearize_full(np.asarray(x, dtype=np.float64), P).f

    def residual(self, x_free: np.ndarray, P: float, epsilon: float) -> np.ndarray:
        reg = RegularizationFn(epsilon)
        lin = self.linearize(x_free, P)
        return reg.value(lin.f) - np.asarray(x_free, dtype=np.float64)

    def jacobian(self, x_free: np.ndarray, P: float, epsilon: float) -> np.ndarray:
        return self.residual_and_jacobian(x_free, P, epsilon)[1]

    def residual_and_jacobian(self, x_free: np.ndarray, P: float, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
        """Residual and the (M, M + 1) Jacobian; the last column is d/dP."""
        reg = RegularizationFn(epsilon)
        x_free = np.asarray(x_free, dtype=np.float64)
        lin = self.linearize(x_free, P)
        slope = reg.slope(lin.f)
        jac = np.empty((self.size, self.size + 1))
        jac[:, : self.size] = slope[:, None] * lin.dfdx
        jac[:, : self.size] -= np.eye(self.size)
        jac[:, self.size] = slope * lin.dfdp
        return reg.value(lin.f) - x_free, jac


@lru_cache(maxsize=16)
def system_for(terms: GameTerms, ancestor_rule: bool = True) -> EquilibriumSystem:
    return EquilibriumSystem(terms, ancestor_rule=ancestor_rule)


def assemble_f(terms: GameTerms, x: np.ndarray, P: float, ancestor_rule: bool = True) -> np.ndarray:
    return system_for(terms, ancestor_rule).assemble_f(x, P)


def residual(terms: GameTerms, x_free: np.ndarray, P: float, epsilon: float, ancestor_rule: bool = True) -> np.ndarray:
    return system_for(terms, ancestor_rule).residual(x_free, P, epsilon)


def jacobian(terms: GameTerms, x_free: np.ndarray, P: float, epsilon: float, ancestor_rule: bool = True) -> np.ndarray:
    return system_for(terms, ancestor_rule).jacobian(x_free, P, epsilon)


_PLANS = np.array(list(itertools.product((0.0, 1.0), repeat=4)))


def _best_response_values(terms: GameTerms, x: np.ndarray, P: float) -> tuple[np.ndarray, np.ndarray]:
    """Best-response and current values per player, from the tree alone."""
    topology = build_topology()
    n = terms.n_cards
    deals = terms.deals
    per_card = (n - 1) * (n - 2)
    x = np.asarray(x, dtype=np.float64)
    table = terminal_payoff_table(n, P)
    cards = np.arange(n)

    best = np.zeros(3)
    current = np.zeros(3)
    for player in (1, 2, 3):
        held = deals[:, player - 1] - 1
        by_card = np.zeros((len(topology.terminals), n))
        indicator = np.ones((_PLANS.shape[0], len(topology.terminals)))
        own_mixed = np.ones((len(topology.terminals), n))
        for terminal in topology.terminals:
            t = terminal.terminal_id - 1
            opponents = path_probability(x, terminal.path, deals, n, skip_player=player)
            by_card[t] = np.bincount(held, weights=opponents * table[t, :, player - 1], minlength=n)
            for node_id, aggressive in terminal.path:
                if NODE_PLAYER[node_id] != player:
                    continue
                slot = node_slot(node_id)
                bit = _PLANS[:, slot]
                indicator[:, t] *= bit if aggressive else 1.0 - bit
                own = x[4 * n * (player - 1) + slot * n + cards]
                own_mixed[t] *= own if aggressive else 1.0 - own

        plan_values = indicator @ by_card / per_card
        allowed = np.ones_like(plan_values, dtype=bool)
        for slot, node_id in enumerate(PLAYER_NODES[player]):
            start = 4 * n * (player - 1) + slot * n
            pinned = terms.pinned_mask[start : start + n]
            pinned_to = terms.pinned_values[start : start + n]
            allowed &= ~pinned[None, :] | (_PLANS[:, slot][:, None] == pinned_to[None, :])
        best[player - 1] = np.mean(np.max(np.where(allowed, plan_values, -np.inf), axis=0))
        current[player - 1] = np.mean(np.sum(own_mixed * by_card, axis=0) / per_card)
    return best, current


def exploitability(terms: GameTerms, x: np.ndarray, P: float) -> np.ndarray:
    """Best-response gain per player holding the other two fixed."""
    best, current = _best_response_values(terms, x, P)
    return best - current


@dataclass(frozen=True)
class EquilibriumReport:
    free_indices: tuple[int, ...]
    classification: tuple[Classification, ...]
    f_values: np.ndarray
    condition_residuals: np.ndarray
    violations: tuple[int, ...]
    exploitability: np.ndarray
    tol_grad: float
    interior_tol: float
    exploit_tol: float
    passed: bool

    @property
    def max_violation(self) -> float:
        return float(np.max(self.condition_residuals, initial=0.0))


def verify_equilibrium(
    terms: GameTerms,
    x: np.ndarray,
    P: float,
    tol_zero: float = 1e-3,
    tol_grad: float | None = None,
    *,
    epsilon: float | None = None,
    exploit_tol: float = 1e-3,
    ancestor_rule: bool = True,
) -> EquilibriumReport:
    if tol_zero <= 0.0 or (tol_grad is not None and tol_grad <= 0.0) or exploit_tol <= 0.0:
        raise ValueError("Tolerances must be positive")
    x = np.asarray(x, dtype=np.float64)
    system = system_for(terms, ancestor_rule)
    f = system.assemble_f(x, P)
    x_free = x[system.free_positions]

    if tol_grad is None:
        tol_grad = 1e-6 * max(float(np.max(np.abs(f), initial=0.0)), 1.0)
    interior_tol = tol_grad
    if epsilon is not None:
        interior_tol = max(tol_grad, 1.01 * epsilon * abs(g_inverse(tol_zero)))

    at_zero = x_free < tol_zero
    at_one = x_free > 1.0 - tol_zero
    interior = ~(at_zero | at_one)
    residuals = np.zeros_like(f)
    residuals[at_zero] = np.maximum(f[at_zero] - tol_grad, 0.0)
    residuals[at_one] = np.maximum(-f[at_one] - tol_grad, 0.0)
    residuals[interior] = np.maximum(np.abs(f[interior]) - interior_tol, 0.0)

    classification: tuple[Classification, ...] = tuple(
        "at-0" if z else ("at-1" if o else "interior") for z, o in zip(at_zero, at_one)
    )
    violations = tuple(int(system.free_positions[r]) + 1 for r in np.flatnonzero(residuals > 0.0))
    gains = exploitability(terms, x, P)
    passed = not violations and bool(np.max(gains) <= exploit_tol)
    if not passed:
        logger.debug(
            "equilibrium check failed P=%.6f violations=%d max_exploitability=%.3e",
            P,
            len(violations),
            float(np.max(gains)),
        )
    return EquilibriumReport(
        free_indices=tuple(system.free_indices),
        classification=classification,
        f_values=f,
        condition_residuals=residuals,
        violations=violations,
        exploitability=gains,
        tol_grad=tol_grad,
        interior_tol=interior_tol,
        exploit_tol=exploit_tol,
        passed=passed,
    )


@dataclass(frozen=True)
class BoundaryReport:
    pot: float
    epsilon: float
    rows: np.ndarray
    classification: tuple[Classification, ...]
    predicted: np.ndarray
    observed: np.ndarray
    relative_deviation: np.ndarray
    rel_tol: float

    @property
    def n_checked(self) -> int:
        return int(self.rows.size)

    @property
    def passed_mask(self) -> np.ndarray:
        return self.relative_deviation <= self.rel_tol

    @property
    def fraction_passed(self) -> float:
        if self.rows.size == 0:
            return 1.0
        return float(np.mean(self.passed_mask))


def asymptotic_boundary_check(
    x_free: np.ndarray,
    P: float,
    epsilon: float,
    f_values: np.ndarray,
    tol_zero: float = 1e-3,
    rel_tol: float = 0.05,
    k_minus: float = K_MINUS,
    k_plus: float = K_PLUS,
) -> BoundaryReport:
    """Compare boundary components with the leading correction -eps*k/f."""
    x_free = np.asarray(x_free, dtype=np.float64)
    f_values = np.asarray(f_values, dtype=np.float64)
    at_zero = x_free < tol_zero
    at_one = x_free > 1.0 - tol_zero
    rows = np.flatnonzero(at_zero | at_one)

    predicted = np.empty(rows.size)
    observed = np.empty(rows.size)
    classification: list[Classification] = []
    for i, r in enumerate(rows):
        if at_zero[r]:
            classification.append("at-0")
            predicted[i] = -epsilon * k_minus / f_values[r] if f_values[r] < 0.0 else np.nan
            observed[i] = x_free[r]
        else:
            classification.append("at-1")
            predicted[i] = epsilon * k_plus / f_values[r] if f_values[r] > 0.0 else np.nan
            observed[i] = 1.0 - x_free[r]
    with np.errstate(invalid="ignore"):
        deviation = np.abs(observed - predicted) / predicted
    deviation = np.where(np.isfinite(deviation), deviation, np.inf)
    return BoundaryReport(
        pot=P,
        epsilon=epsilon,
        rows=rows,
        classification=tuple(classification),
        predicted=predicted,
        observed=observed,
        relative_deviation=deviation,
        rel_tol=rel_tol,
    )
