from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Literal, NamedTuple

import numpy as np

from kuhn3_equilibria.errors import InvalidGameSpec


logger = logging.getLogger("kuhn3_equilibria.game_model")

Variant = Literal["standard", "skp"]
ChildKind = Literal["node", "terminal"]
Polarity = Literal["direct", "complement"]

N_DECISION_NODES = 12
N_TERMINALS = 13
MAX_PATH_LENGTH = 5
SKP_CARDS = 4

PLAYER_NODES: dict[int, tuple[int, int, int, int]] = {
    1: (1, 4, 8, 9),
    2: (2, 5, 6, 10),
    3: (3, 7, 11, 12),
}
NODE_PLAYER: dict[int, int] = {node: player for player, nodes in PLAYER_NODES.items() for node in nodes}

# (aggressive child, passive child); None marks a terminal.
_NODE_CHILDREN: dict[int, tuple[int | None, int | None]] = {
    1: (10, 2),
    2: (7, 3),
    3: (4, None),
    4: (6, 5),
    5: (None, None),
    6: (None, None),
    7: (9, 8),
    8: (None, None),
    9: (None, None),
    10: (12, 11),
    11: (None, None),
    12: (None, None),
}

# (player, node_id, card) entries pinned to 0 in the simplified game, on top of dominance pins.
_SKP_ZERO_PINS: tuple[tuple[int, int], ...] = (
    *((node, 1) for node in (1, 2, 3)),
    *((node, 3) for node in (1, 2, 3)),
    *((node, 2) for node in (4, 5, 7, 8, 10, 11)),
    *((node, 3) for node in (6, 9, 12)),
)


@dataclass(frozen=True)
class TreeChild:
    kind: ChildKind
    ident: int


@dataclass(frozen=True)
class DecisionNode:
    node_id: int
    player: int
    aggressive: TreeChild
    passive: TreeChild


@dataclass(frozen=True)
class TerminalNode:
    terminal_id: int
    folded: frozenset[int]
    wagers: tuple[int, int, int]
    path: tuple[tuple[int, bool], ...]


@dataclass(frozen=True)
class TreeTopology:
    decision_nodes: tuple[DecisionNode, ...]
    terminals: tuple[TerminalNode, ...]
    node_paths: tuple[tuple[tuple[int, bool], ...], ...]

    def node(self, node_id: int) -> DecisionNode:
        if not 1 <= node_id <= N_DECISION_NODES:
            raise ValueError(f"Unknown decision node: {node_id!r}")
        return self.decision_nodes[node_id - 1]

    def terminal(self, terminal_id: int) -> TerminalNode:
        if not 1 <= terminal_id <= N_TERMINALS:
            raise ValueError(f"Unknown terminal: {terminal_id!r}")
        return self.terminals[terminal_id - 1]

    def path_to(self, node_id: int) -> tuple[tuple[int, bool], ...]:
        """Actions leading from the root to ``node_id``."""
        self.node(node_id)
        return self.node_paths[node_id - 1]


class Deal(NamedTuple):
    c1: int
    c2: int
    c3: int


@dataclass(frozen=True)
class GameSpec:
    n_cards: int
    pot: float = 0.0
    variant: Variant = "standard"
    dominance_fixing: bool = True

    def __post_init__(self) -> None:
        _check_cards(self.n_cards)
        if not self.pot >= 0.0:
            raise InvalidGameSpec(f"pot must be >= 0, got {self.pot!r}")
        if self.variant not in ("standard", "skp"):
            raise InvalidGameSpec(f"Unsupported variant: {self.variant!r}")
        if self.variant == "skp":
            if self.n_cards != SKP_CARDS:
                raise InvalidGameSpec(f"The simplified game is played with {SKP_CARDS} cards, got {self.n_cards}")
            if not self.dominance_fixing:
                raise InvalidGameSpec("The simplified game always pins dominated entries")

    @property
    def n_frequencies(self) -> int:
        return 12 * self.n_cards


def _check_cards(n_cards: int) -> None:
    if isinstance(n_cards, bool) or not isinstance(n_cards, (int, np.integer)):
        raise InvalidGameSpec(f"n_cards must be an integer, got {n_cards!r}")
    if n_cards < 4:
        raise InvalidGameSpec(f"n_cards must be at least 4, got {n_cards}")


def pmin(n_cards: int) -> float:
    """Largest pot at which every equilibrium expectation is zero."""
    _check_cards(n_cards)
    return 2.0 / (n_cards - 3)


@lru_cache(maxsize=None)
def build_topology() -> TreeTopology:
    terminals: list[TerminalNode] = []
    node_paths: dict[int, tuple[tuple[int, bool], ...]] = {}
    resolved: dict[int, list[TreeChild]] = {}

    def walk(node_id: int, path: tuple[tuple[int, bool], ...], wagers: tuple[int, int, int], folded: frozenset[int]) -> None:
        node_paths[node_id] = path
        player = NODE_PLAYER[node_id]
        facing_bet = any(wagers)
        children: list[TreeChild] = []
        for aggressive, child in zip((True, False), _NODE_CHILDREN[node_id]):
            next_wagers = list(wagers)
            next_folded = folded
            if aggressive:
                next_wagers[player - 1] = 1
            elif facing_bet:
                next_folded = folded | {player}
            next_path = path + ((node_id, aggressive),)
            if child is None:
                terminal_id = len(terminals) + 1
                terminals.append(
                    TerminalNode(
                        terminal_id=terminal_id,
                        folded=next_folded,
                        wagers=(next_wagers[0], next_wagers[1], next_wagers[2]),
                        path=next_path,
                    )
                )
                children.append(TreeChild("terminal", terminal_id))
            else:
                children.append(TreeChild("node", child))
                walk(child, next_path, (next_wagers[0], next_wagers[1], next_wagers[2]), next_folded)
        resolved[node_id] = children

    walk(1, (), (0, 0, 0), frozenset())

    nodes = tuple(
        DecisionNode(
            node_id=node_id,
            player=NODE_PLAYER[node_id],
            aggressive=resolved[node_id][0],
            passive=resolved[node_id][1],
        )
        for node_id in range(1, N_DECISION_NODES + 1)
    )
    topology = TreeTopology(
        decision_nodes=nodes,
        terminals=tuple(terminals),
        node_paths=tuple(node_paths[n] for n in range(1, N_DECISION_NODES + 1)),
    )
    _validate_topology(topology)
    return topology


def _validate_topology(topology: TreeTopology) -> None:
    if len(topology.decision_nodes) != N_DECISION_NODES or len(topology.terminals) != N_TERMINALS:
        raise RuntimeError("Decision tree does not have 12 decision nodes and 13 terminals")
    for terminal in topology.terminals:
        if len(terminal.path) > MAX_PATH_LENGTH:
            raise RuntimeError(f"Terminal {terminal.terminal_id} path is longer than {MAX_PATH_LENGTH}")
        for player in terminal.folded:
            if terminal.wagers[player - 1] != 0:
                raise RuntimeError(f"Folded player {player} has a wager at terminal {terminal.terminal_id}")


def node_slot(node_id: int) -> int:
    return PLAYER_NODES[NODE_PLAYER[node_id]].index(node_id)


def enumerate_deals(n_cards: int) -> list[Deal]:
    _check_cards(n_cards)
    return [Deal(*cards) for cards in itertools.permutations(range(1, n_cards + 1), 3)]


@lru_cache(maxsize=64)
def deal_array(n_cards: int) -> np.ndarray:
    deals = np.array(enumerate_deals(n_cards), dtype=np.int64)
    deals.setflags(write=False)
    return deals


def freq_index(player: int, node_id: int, card: int, n_cards: int) -> int:
    """1-based flat index of the frequency (player, node, card)."""
    _check_cards(n_cards)
    if player not in PLAYER_NODES:
        raise ValueError(f"player must be 1, 2 or 3, got {player!r}")
    if NODE_PLAYER.get(node_id) != player:
        raise ValueError(f"Node {node_id!r} is not controlled by player {player}")
    if not 1 <= card <= n_cards:
        raise ValueError(f"card must be in 1..{n_cards}, got {card!r}")
    return 4 * n_cards * (player - 1) + node_slot(node_id) * n_cards + card


def flat_label(flat_index: int, n_cards: int) -> tuple[int, int, int]:
    """Inverse of :func:`freq_index`: returns (player, node_id, card)."""
    if not 1 <= flat_index <= 12 * n_cards:
        raise ValueError(f"flat index must be in 1..{12 * n_cards}, got {flat_index!r}")
    player, rest = divmod(flat_index - 1, 4 * n_cards)
    slot, card = divmod(rest, n_cards)
    return player + 1, PLAYER_NODES[player + 1][slot], card + 1


def column_name(flat_index: int, n_cards: int) -> str:
    player, node_id, card = flat_label(flat_index, n_cards)
    return f"p{player}_n{node_id}_c{card}"


def fixed_mask(n_cards: int) -> tuple[np.ndarray, np.ndarray]:
    """Dominance pins as (mask, values) over 0-based positions."""
    _check_cards(n_cards)
    mask = np.zeros(12 * n_cards, dtype=bool)
    values = np.zeros(12 * n_cards, dtype=np.float64)

    def pin(node_id: int, card: int, value: float) -> None:
        pos = freq_index(NODE_PLAYER[node_id], node_id, card, n_cards) - 1
        mask[pos] = True
        values[pos] = value

    for node_id in range(3, 13):
        pin(node_id, n_cards, 1.0)
    for node_id in range(4, 13):
        pin(node_id, 1, 0.0)
    for node_id in (6, 9, 12):
        pin(node_id, 2, 0.0)
    return mask, values


def pinned_entries(spec: GameSpec) -> tuple[np.ndarray, np.ndarray]:
    if not spec.dominance_fixing:
        n = spec.n_frequencies
        return np.zeros(n, dtype=bool), np.zeros(n, dtype=np.float64)
    mask, values = fixed_mask(spec.n_cards)
    if spec.variant == "skp":
        for node_id, card in _SKP_ZERO_PINS:
            pos = freq_index(NODE_PLAYER[node_id], node_id, card, spec.n_cards) - 1
            mask[pos] = True
            values[pos] = 0.0
    return mask, values


def _winner(terminal: TerminalNode, cards: Iterable[int]) -> int:
    cards = tuple(cards)
    active = [m for m in (1, 2, 3) if m not in terminal.folded]
    return max(active, key=lambda m: cards[m - 1])


def terminal_payoff(terminal: TerminalNode | int, deal: Iterable[int], P: float) -> tuple[float, float, float]:
    if isinstance(terminal, int):
        terminal = build_topology().terminal(terminal)
    cards = tuple(deal)
    if len(cards) != 3 or len(set(cards)) != 3:
        raise ValueError(f"A deal is three distinct cards, got {cards!r}")
    winner = _winner(terminal, cards)
    total = P + sum(terminal.wagers)
    values = tuple(
        (total if m == winner else 0.0) - P / 3.0 - terminal.wagers[m - 1]
        for m in (1, 2, 3)
    )
    return values[0], values[1], values[2]


@lru_cache(maxsize=64)
def _payoff_numerators(n_cards: int) -> tuple[np.ndarray, np.ndarray]:
    """Payoff numerators over 3, each of shape (terminals, deals, players)."""
    topology = build_topology()
    deals = deal_array(n_cards)
    n_deals = deals.shape[0]
    const3 = np.zeros((N_TERMINALS, n_deals, 3), dtype=np.int64)
    slope3 = np.zeros((N_TERMINALS, n_deals, 3), dtype=np.int64)
    for terminal in topology.terminals:
        t = terminal.terminal_id - 1
        active = [m for m in (1, 2, 3) if m not in terminal.folded]
        if len(active) == 1:
            winner = np.full(n_deals, active[0] - 1)
        else:
            cols = np.array(active) - 1
            winner = cols[np.argmax(deals[:, cols], axis=1)]
        total = sum(terminal.wagers)
        for m in range(3):
            wins = winner == m
            const3[t, :, m] = np.where(wins, 3 * (total - terminal.wagers[m]), -3 * terminal.wagers[m])
            slope3[t, :, m] = np.where(wins, 2, -1)
    const3.setflags(write=False)
    slope3.setflags(write=False)
    return const3, slope3


def terminal_payoff_table(n_cards: int, P: float) -> np.ndarray:
    """All terminal payoffs for every deal, shape (13, deals, 3)."""
    const3, slope3 = _payoff_numerators(n_cards)
    return (const3 + slope3 * P) / 3.0


@dataclass(frozen=True, eq=False)
class StrategyProfile:
    frequencies: np.ndarray
    fixed_mask: np.ndarray
    fixed_values: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.frequencies, dtype=np.float64)
        if x.shape != self.fixed_mask.shape:
            raise ValueError(f"Expected {self.fixed_mask.shape[0]} frequencies, got {x.shape}")
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValueError("Frequencies must lie in [0, 1]")
        if np.any(x[self.fixed_mask] != self.fixed_values[self.fixed_mask]):
            raise ValueError("Pinned frequencies differ from their pinned values")

    @classmethod
    def from_free(cls, terms: GameTerms, x_free: np.ndarray) -> "StrategyProfile":
        return cls(embed_free(terms, x_free), terms.pinned_mask, terms.pinned_values)

    @property
    def free_values(self) -> np.ndarray:
        return np.asarray(self.frequencies)[~self.fixed_mask]


@dataclass(frozen=True, eq=False)
class GameTerms:
    """Expectations as a list of (deal, terminal) monomials.

    ``index`` holds 0-based frequency positions; unused slots point at the
    sentinel position ``12 * N`` whose value is always 1. Payoff numerators
    are integers over 3 so that ``v_k = (const3_k + slope3_k * P) / 3``.
    """

    spec: GameSpec
    deals: np.ndarray
    deal_ids: np.ndarray
    terminal_ids: np.ndarray
    index: np.ndarray
    direct: np.ndarray
    owner: np.ndarray
    path_length: np.ndarray
    const3: np.ndarray
    slope3: np.ndarray
    pinned_mask: np.ndarray
    pinned_values: np.ndarray
    free_positions: np.ndarray

    @property
    def n_cards(self) -> int:
        return self.spec.n_cards

    @property
    def n_frequencies(self) -> int:
        return self.spec.n_frequencies

    @property
    def sentinel(self) -> int:
        return self.spec.n_frequencies

    @property
    def n_deals(self) -> int:
        return int(self.deals.shape[0])

    @property
    def free_indices(self) -> list[int]:
        return [int(p) + 1 for p in self.free_positions]

    def __len__(self) -> int:
        return int(self.index.shape[0])

    def factor_list(self, term: int) -> list[tuple[int, Polarity]]:
        n = int(self.path_length[term])
        return [
            (int(self.index[term, j]) + 1, "direct" if self.direct[term, j] else "complement")
            for j in range(n)
        ]

    def payoff_coefficients(self, term: int) -> list[tuple[Fraction, Fraction]]:
        return [
            (Fraction(int(self.const3[term, k]), 3), Fraction(int(self.slope3[term, k]), 3))
            for k in range(3)
        ]


@lru_cache(maxsize=32)
def build_terms(spec: GameSpec) -> GameTerms:
    topology = build_topology()
    n = spec.n_cards
    deals = deal_array(n)
    n_deals = deals.shape[0]
    sentinel = 12 * n

    index = np.full((n_deals, N_TERMINALS, MAX_PATH_LENGTH), sentinel, dtype=np.int64)
    direct = np.ones((n_deals, N_TERMINALS, MAX_PATH_LENGTH), dtype=bool)
    owner = np.zeros((n_deals, N_TERMINALS, MAX_PATH_LENGTH), dtype=np.int64)
    path_length = np.zeros((n_deals, N_TERMINALS), dtype=np.int64)

    for terminal in topology.terminals:
        t = terminal.terminal_id - 1
        path_length[:, t] = len(terminal.path)
        for j, (node_id, aggressive) in enumerate(terminal.path):
            player = NODE_PLAYER[node_id]
            index[:, t, j] = 4 * n * (player - 1) + node_slot(node_id) * n + deals[:, player - 1] - 1
            direct[:, t, j] = aggressive
            owner[:, t, j] = player - 1

    const3, slope3 = (np.transpose(a, (1, 0, 2)) for a in _payoff_numerators(n))
    pinned_mask, pinned_values = pinned_entries(spec)
    free_positions = np.flatnonzero(~pinned_mask)
    arrays = {
        "index": index.reshape(-1, MAX_PATH_LENGTH),
        "direct": direct.reshape(-1, MAX_PATH_LENGTH),
        "owner": owner.reshape(-1, MAX_PATH_LENGTH),
        "path_length": path_length.reshape(-1),
        "const3": const3.reshape(-1, 3),
        "slope3": slope3.reshape(-1, 3),
        "deal_ids": np.repeat(np.arange(n_deals), N_TERMINALS),
        "terminal_ids": np.tile(np.arange(1, N_TERMINALS + 1), n_deals),
    }
    for value in (*arrays.values(), pinned_mask, pinned_values, free_positions):
        value.setflags(write=False)

    terms = GameTerms(
        spec=spec,
        deals=deals,
        pinned_mask=pinned_mask,
        pinned_values=pinned_values,
        free_positions=free_positions,
        **arrays,
    )
    logger.debug("built %d terms for n_cards=%d variant=%s free=%d", len(terms), n, spec.variant, free_positions.size)
    return terms


def embed_free(terms: GameTerms, x_free: np.ndarray) -> np.ndarray:
    """Full frequency vector with pinned entries at their pinned values."""
    x_free = np.asarray(x_free, dtype=np.float64)
    if x_free.shape != terms.free_positions.shape:
        raise ValueError(f"Expected {terms.free_positions.size} free frequencies, got {x_free.shape}")
    x = terms.pinned_values.copy()
    x[terms.free_positions] = x_free
    return x


def term_factors(terms: GameTerms, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (terms.n_frequencies,):
        raise ValueError(f"Expected {terms.n_frequencies} frequencies, got {x.shape}")
    values = np.append(x, 1.0)[terms.index]
    return np.where(terms.direct, values, 1.0 - values)


def payoff_weights(terms: GameTerms, P: float) -> np.ndarray:
    """Per-term payoff divided by the deal count, shape (terms, 3)."""
    return (terms.const3 + terms.slope3 * P) / (3.0 * terms.n_deals)


def payoff_slopes(terms: GameTerms) -> np.ndarray:
    return terms.slope3 / (3.0 * terms.n_deals)


def evaluate_expectations(terms: GameTerms, x: np.ndarray, P: float) -> np.ndarray:
    products = np.prod(term_factors(terms, x), axis=1)
    return products @ payoff_weights(terms, P)


def _check_index_set(terms: GameTerms, index_set: Iterable[int], allow_empty: bool) -> tuple[int, ...]:
    indices = tuple(int(i) for i in index_set)
    if len(indices) > 3 or (not indices and not allow_empty):
        raise ValueError(f"Index set must hold 1..3 flat indices, got {indices!r}")
    if len(set(indices)) != len(indices):
        raise ValueError(f"Repeated flat index in {indices!r}")
    for i in indices:
        if not 1 <= i <= terms.n_frequencies:
            raise ValueError(f"flat index out of range: {i!r}")
    return indices


def _partial(terms: GameTerms, x: np.ndarray, weights: np.ndarray, indices: tuple[int, ...]) -> np.ndarray:
    factors = term_factors(terms, x)
    contains = np.ones(len(terms), dtype=bool)
    hit = np.zeros(terms.index.shape, dtype=bool)
    for i in indices:
        hit_i = terms.index == i - 1
        contains &= hit_i.any(axis=1)
        hit |= hit_i
    signs = np.where(terms.direct, 1.0, -1.0)
    reduced = np.where(hit, signs, factors)[contains]
    return np.prod(reduced, axis=1) @ weights[contains]


def mixed_partial(terms: GameTerms, x: np.ndarray, P: float, index_set: Iterable[int]) -> np.ndarray:
    """Exact mixed partial of (E1, E2, E3) with respect to 1..3 distinct frequencies."""
    indices = _check_index_set(terms, index_set, allow_empty=False)
    return _partial(terms, x, payoff_weights(terms, P), indices)


def partial_wrt_P(terms: GameTerms, x: np.ndarray, P: float, index_set: Iterable[int] = ()) -> np.ndarray:
    """P-derivative of :func:`mixed_partial`; payoffs are affine in P, so ``P`` only fixes the signature."""
    indices = _check_index_set(terms, index_set, allow_empty=True)
    return _partial(terms, x, payoff_slopes(terms), indices)


def path_probability(
    x: np.ndarray,
    path: Iterable[tuple[int, bool]],
    deals: np.ndarray,
    n_cards: int,
    skip_player: int | None = None,
) -> np.ndarray:
    """Probability of following ``path`` for every deal, optionally ignoring one player's actions."""
    probability = np.ones(deals.shape[0], dtype=np.float64)
    for node_id, aggressive in path:
        player = NODE_PLAYER[node_id]
        if player == skip_player:
            continue
        pos = 4 * n_cards * (player - 1) + node_slot(node_id) * n_cards + deals[:, player - 1] - 1
        probability *= x[pos] if aggressive else 1.0 - x[pos]
    return probability


def reach_fractions(n_cards: int, x: np.ndarray) -> np.ndarray:
    """Probability that each (node, card) holding reaches the node, shape (12, N).

    Row ``node_id - 1``, column ``card - 1``; conditioned on the acting player
    holding the card and averaged over the opponents' cards.
    """
    topology = build_topology()
    deals = deal_array(n_cards)
    x = np.asarray(x, dtype=np.float64)
    per_card = (n_cards - 1) * (n_cards - 2)
    out = np.zeros((N_DECISION_NODES, n_cards), dtype=np.float64)
    for node in topology.decision_nodes:
        probability = path_probability(x, topology.path_to(node.node_id), deals, n_cards)
        held = deals[:, node.player - 1] - 1
        out[node.node_id - 1] = np.bincount(held, weights=probability, minlength=n_cards) / per_card
    return out


def frequency_grid(n_cards: int, x: np.ndarray) -> np.ndarray:
    """Aggressive frequencies rearranged as (12 nodes, N cards)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros((N_DECISION_NODES, n_cards), dtype=np.float64)
    for node_id in range(1, N_DECISION_NODES + 1):
        player = NODE_PLAYER[node_id]
        start = 4 * n_cards * (player - 1) + node_slot(node_id) * n_cards
        out[node_id - 1] = x[start : start + n_cards]
    return out
