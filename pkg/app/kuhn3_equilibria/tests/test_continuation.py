import dataclasses
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from kuhn3_equilibria.continuation import (
    ArcConstraint,
    Branch,
    BranchPoint,
    ContinuationConfig,
    bootstrap_initial,
    coexisting_solutions,
    continuation_step,
    damped_newton_solve,
    epsilon_continuation,
    max_multiplicity,
    newton_solve,
    predictor,
    sample_branch,
    trace_branch,
)
from kuhn3_equilibria.equilibrium_system import system_for, verify_equilibrium
from kuhn3_equilibria.errors import SolverError, StuckBranchError
from kuhn3_equilibria.game_model import GameSpec, build_terms, embed_free, pmin


def _synthetic_branch(pots: list[float]) -> Branch:
    branch = Branch(game_spec=GameSpec(n_cards=4), epsilon=1e-6, config=ContinuationConfig(), free_indices=(1,))
    for k, P in enumerate(pots):
        branch.points.append(
            BranchPoint(X=np.array([0.1 * k, P]), expectations=np.array([0.1 * k, -0.1 * k, 0.0]), delta_used=0.1)
        )
    return branch


class TestConfig(unittest.TestCase):
    def test_defaults(self) -> None:
        config = ContinuationConfig()
        self.assertEqual(1e-6, config.epsilon_target)
        self.assertEqual(1e-3, config.delta_init)
        self.assertEqual(0.1, config.delta_max)
        self.assertEqual(0.5, config.shrink_factor)
        self.assertEqual(1.1, config.growth_factor)
        self.assertEqual(10.0, config.p_stop)

    def test_rejects_bad_values(self) -> None:
        with self.assertRaises(ValueError):
            ContinuationConfig(delta_init=0.5, delta_max=0.1)
        with self.assertRaises(ValueError):
            ContinuationConfig(shrink_factor=1.0)
        with self.assertRaises(ValueError):
            ContinuationConfig(growth_factor=1.0)
        with self.assertRaises(ValueError):
            ContinuationConfig(epsilon_target=0.0)

    def test_to_dict_round_trip(self) -> None:
        config = ContinuationConfig(rng_seed=4, p_stop=3.5)
        self.assertEqual(config, ContinuationConfig(**config.to_dict()))


class TestPredictor(unittest.TestCase):
    def test_collinear_points(self) -> None:
        history = [np.array([0.0, 0.0]), np.array([0.1, 0.0]), np.array([0.2, 0.0])]
        assert_allclose([0.3, 0.0], predictor(history, 0.1), atol=1e-14)

    def test_parabola(self) -> None:
        points = [np.array([t, t * t]) for t in (0.0, 0.01, 0.02, 0.03)]
        delta = float(np.linalg.norm(points[3] - points[2]))
        quadratic = np.linalg.norm(predictor(points[:3], delta) - points[3])
        linear = np.linalg.norm(predictor(points[1:3], delta) - points[3])
        self.assertLess(quadratic, 1e-4)
        self.assertLess(quadratic, linear / 3.0)

    def test_two_points_is_linear(self) -> None:
        history = [np.array([1.0, 1.0]), np.array([1.0, 2.0])]
        assert_allclose([1.0, 2.5], predictor(history, 0.5))

    def test_needs_two_points(self) -> None:
        with self.assertRaises(ValueError):
            predictor([np.zeros(2)], 0.1)


class TestNewton(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.system = system_for(build_terms(GameSpec(n_cards=4)))
        cls.config = ContinuationConfig()
        # epsilon = 1 keeps g(f / eps) close to 1/2, so Newton converges from anywhere in the box
        cls.epsilon = 1.0
        cls.root = damped_newton_solve(cls.system, np.full(26, 0.5), 1.0, cls.epsilon, cls.config)

    def test_damped_newton_converges(self) -> None:
        self.assertTrue(self.root.converged)
        self.assertLess(self.root.residual_norm, self.config.newton_tol)

    def test_exact_root_takes_no_iterations(self) -> None:
        result = newton_solve(self.system, self.root.X, "fixed_p", self.config, self.epsilon)
        self.assertTrue(result.converged)
        self.assertEqual(0, result.iterations)

    def test_perturbed_root(self) -> None:
        rng = np.random.default_rng(1)
        guess = self.root.X + np.append(rng.uniform(-1e-3, 1e-3, 26), 0.0)
        result = newton_solve(self.system, guess, "fixed_p", self.config, self.epsilon)
        self.assertTrue(result.converged)
        assert_allclose(self.root.X, result.X, atol=1e-8)

    def test_guess_outside_box_is_clamped(self) -> None:
        guess = self.root.X.copy()
        guess[0] = -0.3
        guess[1] = 1.4
        result = newton_solve(self.system, guess, "fixed_p", self.config, self.epsilon)
        self.assertTrue(result.converged)

    def test_augmented_needs_arc(self) -> None:
        with self.assertRaises(ValueError):
            newton_solve(self.system, self.root.X, "augmented", self.config, self.epsilon)

    def test_augmented_mode_moves_along_the_arc(self) -> None:
        tangent = np.zeros(27)
        tangent[-1] = 1.0
        arc = ArcConstraint(anchor=self.root.X, tangent=tangent, delta=0.05)
        result = newton_solve(self.system, self.root.X, "augmented", self.config, self.epsilon, arc)
        self.assertTrue(result.converged)
        self.assertAlmostEqual(1.05, float(result.X[-1]), places=9)

    def test_max_iters_reports_failure(self) -> None:
        config = dataclasses.replace(self.config, newton_max_iters=1, newton_tol=1e-300)
        result = newton_solve(self.system, np.append(np.full(26, 0.5), 1.0), "fixed_p", config, self.epsilon)
        self.assertFalse(result.converged)
        self.assertEqual("max_iters", result.reason)

    def test_epsilon_continuation(self) -> None:
        x = epsilon_continuation(self.system, self.root.X[:-1], 1.0, 1.0, 0.25, self.config)
        self.assertLess(float(np.max(np.abs(self.system.residual(x, 1.0, 0.25)))), self.config.newton_tol)


class TestStep(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.system = system_for(build_terms(GameSpec(n_cards=4)))
        cls.config = ContinuationConfig(delta_max=0.5)
        cls.epsilon = 1.0
        first = damped_newton_solve(cls.system, np.full(26, 0.5), 1.0, cls.epsilon, cls.config)
        second = newton_solve(cls.system, first.X + np.append(np.zeros(26), 0.01), "fixed_p", cls.config, cls.epsilon)
        cls.history = [first.X, second.X]

    def test_step_is_accepted(self) -> None:
        point, delta_next = continuation_step(self.system, self.history, 0.02, self.config, self.epsilon)
        distance = float(np.linalg.norm(point.X - self.history[-1]))
        self.assertLessEqual(distance, 1.05 * 0.02)
        self.assertGreater(point.pot, 1.01)
        self.assertAlmostEqual(0.022, delta_next, places=12)
        self.assertAlmostEqual(0.0, float(point.expectations.sum()), places=12)

    def test_delta_next_is_capped(self) -> None:
        _, delta_next = continuation_step(self.system, self.history, 0.5, self.config, self.epsilon)
        self.assertLessEqual(delta_next, 0.5)

    def test_underflow_raises(self) -> None:
        config = dataclasses.replace(self.config, min_delta=1.0)
        with self.assertRaises(StuckBranchError) as ctx:
            continuation_step(self.system, self.history, 0.02, config, self.epsilon)
        self.assertIsInstance(ctx.exception, SolverError)
        self.assertIn("delta", ctx.exception.diagnostics)

    def test_rejects_non_positive_delta(self) -> None:
        with self.assertRaises(ValueError):
            continuation_step(self.system, self.history, 0.0, self.config, self.epsilon)


class TestTrace(unittest.TestCase):
    def _config(self) -> ContinuationConfig:
        return ContinuationConfig(
            epsilon_target=0.05,
            epsilon_start=0.1,
            delta_init=0.05,
            delta_max=0.2,
            p_stop=1.0,
            rng_seed=3,
        )

    def test_trace_reaches_p_stop_and_is_deterministic(self) -> None:
        first = trace_branch(GameSpec(n_cards=4), self._config())
        second = trace_branch(GameSpec(n_cards=4), self._config())

        self.assertEqual("p_stop", first.termination)
        self.assertEqual(0.0, first.points[0].pot)
        self.assertGreater(first.points[-1].pot, 1.0)
        self.assertEqual(26, len(first.free_indices))
        assert_allclose(np.zeros(len(first)), first.expectations().sum(axis=1), atol=1e-12)
        assert_array_equal(first.states(), second.states())

    def test_bootstrap(self) -> None:
        first, second = bootstrap_initial(GameSpec(n_cards=4), self._config())
        self.assertTrue(first.converged and second.converged)
        self.assertEqual(0.0, float(first.X[-1]))
        self.assertAlmostEqual(0.01, float(second.X[-1]))
        system = system_for(build_terms(GameSpec(n_cards=4)))
        residual = float(np.max(np.abs(system.residual(second.X[:-1], float(second.X[-1]), 0.05))))
        self.assertLess(residual, 1e-9)
        self.assertAlmostEqual(residual, second.residual_norm, places=15)
        assert_array_equal(first.X, bootstrap_initial(GameSpec(n_cards=4), self._config())[0].X)

    def test_every_point_records_its_solve(self) -> None:
        branch = trace_branch(GameSpec(n_cards=4), self._config())
        for point in branch.points:
            self.assertIsNotNone(point.newton_iters)
            self.assertLess(point.residual_norm, 1e-9)

    def test_step_budget(self) -> None:
        config = dataclasses.replace(self._config(), step_budget=2)
        branch = trace_branch(GameSpec(n_cards=4), config)
        self.assertEqual("step_budget", branch.termination)
        self.assertEqual(4, len(branch))


class TestTraceThroughBettingOnset(unittest.TestCase):
    """Default epsilon, coarse steps, N = 4 up to P = 2.5: crosses the start of betting at P = 2."""

    @classmethod
    def setUpClass(cls) -> None:
        cls.spec = GameSpec(n_cards=4)
        cls.terms = build_terms(cls.spec)
        cls.config = ContinuationConfig(delta_init=0.05, delta_max=0.2, p_stop=2.5)
        cls.branch = trace_branch(cls.spec, cls.config)

    def test_reaches_p_stop(self) -> None:
        self.assertEqual("p_stop", self.branch.termination)
        self.assertGreater(self.branch.points[-1].pot, 2.5)
        self.assertEqual(1e-6, self.branch.epsilon)

    def test_steps_respect_the_acceptance_bound(self) -> None:
        chords = np.linalg.norm(np.diff(self.branch.states(), axis=0), axis=1)
        deltas = np.array([p.delta_used for p in self.branch.points[2:]])
        self.assertTrue(np.all(chords[1:] <= np.maximum(1.05 * deltas, 1e-3 * self.branch.epsilon)))

    def test_points_are_equilibria(self) -> None:
        for point in self.branch.points:
            x = embed_free(self.terms, point.x_free)
            report = verify_equilibrium(self.terms, x, point.pot, epsilon=self.branch.epsilon)
            self.assertTrue(report.passed, msg=f"P={point.pot} violations={report.violations}")

    def test_profit_appears_past_pmin(self) -> None:
        threshold = pmin(4)
        below = self.branch.pots() <= threshold - 0.05
        self.assertTrue(below.any())
        self.assertLess(float(np.max(np.abs(self.branch.expectations()[below]))), 1e-4)
        E = coexisting_solutions(self.branch, threshold + 0.2)[0]
        self.assertGreater(float(E[2]), 1e-4)


class TestBranchHelpers(unittest.TestCase):
    def setUp(self) -> None:
        self.branch = _synthetic_branch([0.0, 1.0, 2.0, 1.5, 1.0, 2.0, 3.0])

    def test_arclength(self) -> None:
        arclen = self.branch.arclength()
        self.assertEqual(0.0, arclen[0])
        self.assertTrue(np.all(np.diff(arclen) > 0.0))

    def test_sample_first_crossing(self) -> None:
        sample = sample_branch(self.branch, [1.25])[0]
        assert_allclose([0.125, 1.25], sample)
        with self.assertRaises(ValueError):
            sample_branch(self.branch, [5.0])

    def test_coexisting_solutions(self) -> None:
        self.assertEqual(3, len(coexisting_solutions(self.branch, 1.25)))
        self.assertEqual(1, len(coexisting_solutions(self.branch, 2.5)))

    def test_max_multiplicity(self) -> None:
        pot, count = max_multiplicity(self.branch, bin_width=0.1)
        self.assertEqual(3, count)
        self.assertTrue(1.0 < pot < 2.0)


if __name__ == "__main__":
    unittest.main()
