from __future__ import annotations

import dataclasses
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from kuhn3_equilibria.equilibrium_system import EquilibriumSystem, system_for
from kuhn3_equilibria.errors import BootstrapError, SolverError, StuckBranchError
from kuhn3_equilibria.game_model import GameSpec, build_terms, evaluate_expectations


logger = logging.getLogger("kuhn3_equilibria.continuation")

NewtonMode = Literal["fixed_p", "augmented"]
Termination = Literal["running", "p_stop", "step_budget", "negative_pot"]

_CLAMP = 1e-16
# rounding headroom, in units of machine epsilon, for the attainable residual
_ROUNDING_ULPS = 256.0


@dataclass(frozen=True)
class ContinuationConfig:
    epsilon_target: float = 1e-6
    epsilon_start: float = 0.1
    delta_init: float = 1e-3
    delta_max: float = 0.1
    shrink_factor: float = 0.5
    growth_factor: float = 1.1
    newton_tol: float = 1e-9
    newton_max_iters: int = 25
    p_stop: float = 10.0
    step_budget: int = 200_000
    rng_seed: int = 0
    ancestor_rule: bool = True
    bootstrap_restarts: int = 20
    epsilon_factor: float = 0.5
    accept_floor_coeff: float = 1e-3
    min_delta: float = 1e-14
    first_pot: float = 0.01

    def __post_init__(self) -> None:
        positive = (
            "epsilon_target",
            "epsilon_start",
            "delta_init",
            "delta_max",
            "newton_tol",
            "newton_max_iters",
            "p_stop",
            "step_budget",
            "bootstrap_restarts",
            "min_delta",
            "first_pot",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0.0 < self.shrink_factor < 1.0:
            raise ValueError(f"shrink_factor must lie in (0, 1), got {self.shrink_factor!r}")
        if not 0.0 < self.epsilon_factor < 1.0:
            raise ValueError(f"epsilon_factor must lie in (0, 1), got {self.epsilon_factor!r}")
        if not self.growth_factor > 1.0:
            raise ValueError(f"growth_factor must exceed 1, got {self.growth_factor!r}")
        if self.accept_floor_coeff < 0.0:
            raise ValueError("accept_floor_coeff must be non-negative")
        if self.delta_init > self.delta_max:
            raise ValueError("delta_init must not exceed delta_max")

    def to_dict(self) -> dict[str, float | int | bool]:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class NewtonResult:
    X: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float
    reason: str


@dataclass(frozen=True, eq=False)
class ArcConstraint:
    """(X - anchor) . tangent = delta."""

    anchor: np.ndarray
    tangent: np.ndarray
    delta: float


@dataclass(frozen=True, eq=False)
class BranchPoint:
    X: np.ndarray
    expectations: np.ndarray
    delta_used: float
    newton_iters: int | None = None
    residual_norm: float | None = None

    @property
    def x_free(self) -> np.ndarray:
        return self.X[:-1]

    @property
    def pot(self) -> float:
        return float(self.X[-1])


@dataclass(eq=False)
class Branch:
    game_spec: GameSpec
    epsilon: float
    config: ContinuationConfig
    free_indices: tuple[int, ...]
    points: list[BranchPoint] = field(default_factory=list)
    termination: Termination = "running"

    def __len__(self) -> int:
        return len(self.points)

    def states(self) -> np.ndarray:
        return np.array([p.X for p in self.points])

    def pots(self) -> np.ndarray:
        return np.array([p.pot for p in self.points])

    def expectations(self) -> np.ndarray:
        return np.array([p.expectations for p in self.points])

    def arclength(self) -> np.ndarray:
        """Cumulative chord length along the branch."""
        states = self.states()
        if len(states) == 0:
            return np.zeros(0)
        chords = np.linalg.norm(np.diff(states, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(chords)])


def _solve_linear(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray | None:
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinAlgWarning)
        try:
            step = lu_solve(lu_factor(matrix, check_finite=False), rhs, check_finite=False)
        except (LinAlgWarning, np.linalg.LinAlgError, ValueError):
            return None
    if not np.all(np.isfinite(step)):
        return None
    return step


def attainable_tol(config: ContinuationConfig, jac: np.ndarray, X: np.ndarray) -> float:
    """newton_tol, raised to the rounding level of g(f / epsilon) where the slopes are steep.

    ``jac`` is the (M, M + 1) Jacobian at ``X``. Each row's rounding error is bounded by
    a multiple of machine epsilon times sum_j |dr_i/dX_j| * max(|X_j|, 1).
    """
    scale = np.abs(jac) @ np.maximum(np.abs(X), 1.0)
    floor = _ROUNDING_ULPS * float(np.finfo(np.float64).eps) * float(np.max(scale))
    return max(config.newton_tol, floor)


def _evaluate(
    system: EquilibriumSystem,
    X: np.ndarray,
    mode: NewtonMode,
    epsilon: float,
    arc: ArcConstraint | None,
    config: ContinuationConfig,
) -> tuple[np.ndarray, np.ndarray, float]:
    r, jac = system.residual_and_jacobian(X[:-1], float(X[-1]), epsilon)
    tol = attainable_tol(config, jac, X)
    if mode == "fixed_p":
        return r, jac[:, :-1], tol
    assert arc is not None
    arc_residual = float((X - arc.anchor) @ arc.tangent) - arc.delta
    return np.append(r, arc_residual), np.vstack([jac, arc.tangent]), tol


def newton_solve(
    system: EquilibriumSystem,
    X_guess: np.ndarray,
    mode: NewtonMode,
    config: ContinuationConfig,
    epsilon: float,
    arc: ArcConstraint | None = None,
) -> NewtonResult:
    """Plain Newton on the regularized system; ``X_guess`` is (x_free, P) in both modes.

    Converges once the residual sup-norm drops below ``attainable_tol`` at the iterate.
    """
    if mode == "augmented" and arc is None:
        raise ValueError("augmented mode needs an arc-length constraint")
    X = np.array(X_guess, dtype=np.float64)
    X[:-1] = np.clip(X[:-1], _CLAMP, 1.0 - _CLAMP)
    first_norm: float | None = None

    for iteration in itertools.count():
        r, jac, tol = _evaluate(system, X, mode, epsilon, arc, config)
        norm = float(np.max(np.abs(r)))
        if not math.isfinite(norm):
            return NewtonResult(X, False, iteration, norm, "non_finite")
        if norm < tol:
            return NewtonResult(X, True, iteration, norm, "converged")
        if iteration >= config.newton_max_iters:
            return NewtonResult(X, False, iteration, norm, "max_iters")
        if first_norm is None:
            first_norm = norm
        elif norm > 1e8 * max(first_norm, 1.0):
            return NewtonResult(X, False, iteration, norm, "diverged")

        step = _solve_linear(jac, -r)
        if step is None:
            return NewtonResult(X, False, iteration, norm, "singular")
        if mode == "fixed_p":
            X[:-1] += step
        else:
            X += step
    raise AssertionError("unreachable")


def damped_newton_solve(
    system: EquilibriumSystem,
    x_guess: np.ndarray,
    P: float,
    epsilon: float,
    config: ContinuationConfig,
    max_iters: int = 200,
) -> NewtonResult:
    """Newton with Armijo backtracking on 0.5*|r|^2 at fixed P."""
    x = np.clip(np.asarray(x_guess, dtype=np.float64), _CLAMP, 1.0 - _CLAMP)
    r, jac = system.residual_and_jacobian(x, P, epsilon)
    for iteration in range(max_iters + 1):
        norm = float(np.max(np.abs(r)))
        if not math.isfinite(norm):
            return NewtonResult(np.append(x, P), False, iteration, norm, "non_finite")
        if norm < attainable_tol(config, jac, np.append(x, P)):
            return NewtonResult(np.append(x, P), True, iteration, norm, "converged")
        if iteration == max_iters:
            break
        step = _solve_linear(jac[:, :-1], -r)
        if step is None:
            return NewtonResult(np.append(x, P), False, iteration, norm, "singular")

        merit = 0.5 * float(r @ r)
        lam = 1.0
        for _ in range(40):
            x_try = x + lam * step
            r_try, jac_try = system.residual_and_jacobian(x_try, P, epsilon)
            if np.all(np.isfinite(r_try)) and 0.5 * float(r_try @ r_try) <= (1.0 - 2e-4 * lam) * merit:
                x, r, jac = x_try, r_try, jac_try
                break
            lam *= 0.5
        else:
            return NewtonResult(np.append(x, P), False, iteration, norm, "line_search")
    return NewtonResult(np.append(x, P), False, max_iters, float(np.max(np.abs(r))), "max_iters")


def _epsilon_stages(
    system: EquilibriumSystem,
    start: NewtonResult,
    eps_from: float,
    eps_to: float,
    config: ContinuationConfig,
) -> NewtonResult:
    result = start
    P = float(start.X[-1])
    epsilon = eps_from
    factor = config.epsilon_factor
    shrinking = eps_to < eps_from
    stage = 0
    while not math.isclose(epsilon, eps_to, rel_tol=1e-12):
        trial = max(epsilon * factor, eps_to) if shrinking else min(epsilon / factor, eps_to)
        attempt = newton_solve(system, result.X, "fixed_p", config, trial)
        if attempt.converged:
            result, epsilon = attempt, trial
            stage += 1
            logger.info(
                "epsilon stage=%d epsilon=%.3e P=%.4f newton=%d residual=%.2e",
                stage,
                epsilon,
                P,
                attempt.iterations,
                attempt.residual_norm,
            )
            continue
        factor = math.sqrt(factor)
        logger.debug("epsilon stage rejected epsilon=%.3e reason=%s factor=%.6f", trial, attempt.reason, factor)
        if factor > 1.0 - 1e-6:
            raise SolverError(
                "epsilon continuation stalled",
                {"epsilon": epsilon, "target": eps_to, "P": P, "reason": attempt.reason},
            )
    return result


def epsilon_continuation(
    system: EquilibriumSystem,
    x: np.ndarray,
    P: float,
    eps_from: float,
    eps_to: float,
    config: ContinuationConfig,
) -> np.ndarray:
    """Carry a solution at ``eps_from`` to ``eps_to`` in geometric stages at fixed P."""
    X = np.append(np.asarray(x, dtype=np.float64), P)
    start = NewtonResult(X, True, 0, float(np.max(np.abs(system.residual(X[:-1], P, eps_from)))), "given")
    return _epsilon_stages(system, start, eps_from, eps_to, config).X[:-1]


def bootstrap_initial(
    game_spec: GameSpec,
    config: ContinuationConfig,
    system: EquilibriumSystem | None = None,
) -> tuple[NewtonResult, NewtonResult]:
    """Solves at P = 0 and P = first_pot, both at epsilon_target.

    Each result carries the iteration count and residual of the last solve that produced it.
    """
    if system is None:
        system = system_for(build_terms(game_spec), config.ancestor_rule)
    rng = np.random.default_rng(config.rng_seed)

    first: NewtonResult | None = None
    last_reason = ""
    for attempt in range(1, config.bootstrap_restarts + 1):
        guess = rng.uniform(0.0, 1.0, size=system.size)
        result = damped_newton_solve(system, guess, 0.0, config.epsilon_start, config)
        if not result.converged:
            last_reason = result.reason
            logger.info("bootstrap attempt=%d failed reason=%s residual=%.2e", attempt, result.reason, result.residual_norm)
            continue
        logger.info("bootstrap attempt=%d solved P=0 epsilon=%.3e newton=%d", attempt, config.epsilon_start, result.iterations)
        try:
            first = _epsilon_stages(system, result, config.epsilon_start, config.epsilon_target, config)
        except SolverError as exc:
            last_reason = str(exc)
            logger.info("bootstrap attempt=%d epsilon continuation failed: %s", attempt, exc)
            continue
        break
    if first is None:
        raise BootstrapError(
            "no solution at P=0",
            {"n_cards": game_spec.n_cards, "restarts": config.bootstrap_restarts, "reason": last_reason},
        )

    x0 = first.X[:-1]
    second = newton_solve(system, np.append(x0, config.first_pot), "fixed_p", config, config.epsilon_target)
    if not second.converged:
        second = damped_newton_solve(system, x0, config.first_pot, config.epsilon_target, config)
    if not second.converged:
        raise BootstrapError(
            "no solution at the first pot value",
            {"P": config.first_pot, "reason": second.reason, "residual": second.residual_norm},
        )
    return first, second


def predictor(history: Sequence[np.ndarray], delta: float) -> np.ndarray:
    """Extrapolate one step ``delta`` of chord length past the last point."""
    if len(history) < 2:
        raise ValueError("predictor needs at least two points")
    if len(history) == 2:
        a, b = (np.asarray(h, dtype=np.float64) for h in history)
        chord = np.linalg.norm(b - a)
        if chord == 0.0:
            raise ValueError("repeated point in history")
        return b + delta * (b - a) / chord

    a, b, c = (np.asarray(h, dtype=np.float64) for h in history[-3:])
    s1 = np.linalg.norm(b - a)
    s2 = s1 + np.linalg.norm(c - b)
    if s1 == 0.0 or s2 == s1:
        raise ValueError("repeated point in history")
    s = s2 + delta
    la = (s - s1) * (s - s2) / (s1 * s2)
    lb = s * (s - s2) / (s1 * (s1 - s2))
    lc = s * (s - s1) / (s2 * (s2 - s1))
    return la * a + lb * b + lc * c


def continuation_step(
    system: EquilibriumSystem,
    history: Sequence[np.ndarray],
    delta: float,
    config: ContinuationConfig,
    epsilon: float,
) -> tuple[BranchPoint, float]:
    """One accepted pseudo-arclength step; shrinks delta until a step is accepted.

    At each delta the quadratic guess is tried first; if its corrector is rejected the
    secant guess is tried at the same delta before shrinking.
    """
    if len(history) < 2:
        raise ValueError("continuation needs at least two points")
    if not delta > 0.0:
        raise ValueError(f"delta must be positive, got {delta!r}")
    anchor = np.asarray(history[-1], dtype=np.float64)
    secant = anchor - np.asarray(history[-2], dtype=np.float64)
    tangent = secant / np.linalg.norm(secant)
    floor = config.accept_floor_coeff * epsilon
    windows = [history[-3:], history[-2:]] if len(history) >= 3 else [history[-2:]]

    while True:
        if delta < config.min_delta:
            raise StuckBranchError(
                "step size underflow",
                {"P": float(anchor[-1]), "delta": delta, "epsilon": epsilon},
            )
        arc = ArcConstraint(anchor, tangent, delta)
        for window in windows:
            result = newton_solve(system, predictor(window, delta), "augmented", config, epsilon, arc)
            if result.converged:
                distance = float(np.linalg.norm(result.X - anchor))
                if distance <= max(1.05 * delta, floor):
                    expectations = evaluate_expectations(system.terms, system.embed(result.X[:-1]), float(result.X[-1]))
                    point = BranchPoint(
                        X=result.X,
                        expectations=expectations,
                        delta_used=delta,
                        newton_iters=result.iterations,
                        residual_norm=result.residual_norm,
                    )
                    return point, min(config.growth_factor * delta, config.delta_max)
                reason = f"distance={distance:.3e}"
            else:
                reason = result.reason
            logger.debug(
                "step rejected P=%.6f delta=%.3e predictor=%d-point reason=%s",
                float(anchor[-1]),
                delta,
                len(window),
                reason,
            )
        delta *= config.shrink_factor


def trace_branch(game_spec: GameSpec, config: ContinuationConfig) -> Branch:
    terms = build_terms(game_spec)
    system = system_for(terms, config.ancestor_rule)
    epsilon = config.epsilon_target
    branch = Branch(
        game_spec=game_spec,
        epsilon=epsilon,
        config=config,
        free_indices=tuple(system.free_indices),
    )
    logger.info(
        "tracing n_cards=%d variant=%s free=%d epsilon=%.3e p_stop=%.4f seed=%d",
        game_spec.n_cards,
        game_spec.variant,
        system.size,
        epsilon,
        config.p_stop,
        config.rng_seed,
    )

    first, second = bootstrap_initial(game_spec, config, system=system)
    X0, X1 = first.X, second.X
    for result, delta_used in ((first, 0.0), (second, float(np.linalg.norm(X1 - X0)))):
        branch.points.append(
            BranchPoint(
                X=result.X,
                expectations=evaluate_expectations(terms, system.embed(result.X[:-1]), float(result.X[-1])),
                delta_used=delta_used,
                newton_iters=result.iterations,
                residual_norm=result.residual_norm,
            )
        )

    history = [X0, X1]
    delta = config.delta_init
    steps = 0
    while True:
        pot = float(history[-1][-1])
        if pot > config.p_stop and history[-1][-1] - history[-2][-1] > 0.0:
            branch.termination = "p_stop"
            break
        if pot < 0.0:
            logger.warning("branch returned below P=0 at step=%d; stopping", len(branch.points) - 1)
            branch.termination = "negative_pot"
            break
        if steps >= config.step_budget:
            logger.info("step budget exhausted steps=%d P=%.6f", steps, pot)
            branch.termination = "step_budget"
            break

        point, delta = continuation_step(system, history, delta, config, epsilon)
        branch.points.append(point)
        history = [*history[-2:], point.X]
        steps += 1
        logger.info(
            "step=%d P=%.6f delta=%.3e newton=%d residual=%.2e",
            len(branch.points) - 1,
            point.pot,
            point.delta_used,
            point.newton_iters,
            point.residual_norm,
        )

    logger.info("branch finished points=%d termination=%s", len(branch.points), branch.termination)
    return branch


def sample_branch(branch: Branch, pots: Sequence[float]) -> np.ndarray:
    """States at the first crossing of each pot value, linearly interpolated."""
    states = branch.states()
    P = states[:, -1]
    out = np.empty((len(pots), states.shape[1]))
    for row, target in enumerate(pots):
        hits = np.flatnonzero((P[:-1] - target) * (P[1:] - target) <= 0.0)
        if hits.size == 0:
            raise ValueError(f"branch never reaches P={target!r}")
        i = int(hits[0])
        span = P[i + 1] - P[i]
        weight = 0.0 if span == 0.0 else (target - P[i]) / span
        out[row] = (1.0 - weight) * states[i] + weight * states[i + 1]
    return out


def coexisting_solutions(branch: Branch, pot: float, distinct_tol: float = 1e-3) -> list[np.ndarray]:
    """Distinct expectation vectors of all branch crossings of ``pot``."""
    P = branch.pots()
    E = branch.expectations()
    lo = np.minimum(P[:-1], P[1:])
    hi = np.maximum(P[:-1], P[1:])
    found: list[np.ndarray] = []
    for i in np.flatnonzero((lo <= pot) & (pot <= hi)):
        span = P[i + 1] - P[i]
        weight = 0.0 if span == 0.0 else (pot - P[i]) / span
        value = (1.0 - weight) * E[i] + weight * E[i + 1]
        if all(np.linalg.norm(value - other) > distinct_tol for other in found):
            found.append(value)
    return found


def max_multiplicity(branch: Branch, bin_width: float = 1e-3, distinct_tol: float = 1e-3) -> tuple[float, int]:
    """Pot value (on a grid of ``bin_width``) with the most coexisting solutions."""
    P = branch.pots()
    grid = np.arange(max(float(P.min()), 0.0) + 0.5 * bin_width, float(P.max()), bin_width)
    best_pot, best_count = float(P[0]), 1
    for pot in grid:
        count = len(coexisting_solutions(branch, float(pot), distinct_tol))
        if count > best_count:
            best_pot, best_count = float(pot), count
    return best_pot, best_count


def refine_epsilon(
    game_spec: GameSpec,
    config: ContinuationConfig,
    pot: float,
    epsilons: Sequence[float],
) -> list[tuple[float, np.ndarray]]:
    """Trace the branch once per epsilon and sample it at ``pot``."""
    samples: list[tuple[float, np.ndarray]] = []
    for epsilon in epsilons:
        run = dataclasses.replace(
            config,
            epsilon_target=epsilon,
            epsilon_start=max(config.epsilon_start, epsilon),
            p_stop=pot + 0.1,
        )
        branch = trace_branch(game_spec, run)
        samples.append((epsilon, sample_branch(branch, [pot])[0]))
    return samples
