"""Long-running checks of traced branches.

Enabled with KUHN3_RUN_SLOW_TESTS=1; each class traces its own branches once.
"""

import contextlib
import dataclasses
import io
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

from kuhn3_equilibria.cli import run_cli
from kuhn3_equilibria.continuation import (
    ContinuationConfig,
    coexisting_solutions,
    max_multiplicity,
    newton_solve,
    refine_epsilon,
    trace_branch,
)
from kuhn3_equilibria.equilibrium_system import asymptotic_boundary_check, system_for, verify_equilibrium
from kuhn3_equilibria.game_model import GameSpec, build_terms, embed_free, frequency_grid, pmin, reach_fractions
from kuhn3_equilibria.settings import Settings
from kuhn3_equilibria.skp_oracle import (
    compare_embedding,
    embed_skp,
    extract_skp,
    skp_regularized_guess,
    skp_row_scales,
    solution1_closed_form,
)
from kuhn3_equilibria.tests.test_equilibrium_system import _fd_jacobian

SLOW = unittest.skipUnless(Settings.load().run_slow_tests, "set KUHN3_RUN_SLOW_TESTS=1")
SKP_SPEC = GameSpec(n_cards=4, variant="skp")
B3 = 10  # position of b3 in the simplified unknowns


@SLOW
class TestSimplifiedGame(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.system = system_for(build_terms(SKP_SPEC))
        cls.scales = skp_row_scales(cls.system)

    def test_branch_matches_solution_one(self) -> None:
        branch = trace_branch(SKP_SPEC, ContinuationConfig(p_stop=4.0, delta_max=0.05))
        # ends of [2, 3] trimmed: the bounds pinch at P = 3, and P = 2 is the smoothed onset of betting
        comparison = compare_embedding(branch, row_scales=self.scales, p_window=(2.05, 2.95))
        self.assertGreaterEqual(comparison.n_checked, 20)
        self.assertTrue(comparison.passed, msg=[p for p in comparison.points if not p.passed][:3])

    def test_epsilon_refinement(self) -> None:
        epsilons = [1e-2, 1e-3, 1e-4, 1e-6]
        samples = refine_epsilon(SKP_SPEC, ContinuationConfig(delta_max=0.05), 2.5, epsilons)
        exact = solution1_closed_form(2.5).b3
        errors = [abs(extract_skp(X[:-1], self.system.free_indices)[B3] - exact) for _, X in samples]
        self.assertTrue(all(a > b for a, b in zip(errors, errors[1:])), msg=errors)
        self.assertLess(errors[-1], 1e-3)

    def test_newton_from_regularized_guess(self) -> None:
        guess = skp_regularized_guess(2.5, 1e-6, row_scales=self.scales)
        X = np.append(embed_skp(guess, self.system.free_indices), 2.5)
        result = newton_solve(self.system, X, "fixed_p", ContinuationConfig(), 1e-6)
        self.assertTrue(result.converged, msg=result.reason)
        report = verify_equilibrium(self.system.terms, self.system.embed(result.X[:-1]), 2.5, epsilon=1e-6)
        self.assertTrue(report.passed, msg=report.violations)


@SLOW
class TestZeroProfitThreshold(unittest.TestCase):
    def test_betting_starts_at_pmin(self) -> None:
        for n_cards in (4, 5, 6, 7):
            threshold = pmin(n_cards)
            branch = trace_branch(GameSpec(n_cards=n_cards), ContinuationConfig(p_stop=threshold + 0.3))
            below = branch.pots() <= threshold - 0.05
            self.assertTrue(below.any())
            self.assertLess(float(np.max(np.abs(branch.expectations()[below]))), 1e-4, msg=f"N={n_cards}")
            E = coexisting_solutions(branch, threshold + 0.2)[0]
            self.assertGreater(float(E[2]), 1e-4, msg=f"N={n_cards}")


@SLOW
class TestFourCardBranch(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.spec = GameSpec(n_cards=4)
        cls.terms = build_terms(cls.spec)
        cls.system = system_for(cls.terms)
        cls.branch = trace_branch(cls.spec, ContinuationConfig())

    def test_players_one_and_two_check(self) -> None:
        for point in self.branch.points:
            if not 1.0 < point.pot < 2.9:
                continue
            x = embed_free(self.terms, point.x_free)
            self.assertLess(float(frequency_grid(4, x)[:2].max()), 1e-3, msg=f"P={point.pot}")
            reach = reach_fractions(4, x)
            self.assertLess(float(reach[6:].max()), 1e-3, msg=f"P={point.pot}")

    def test_every_point_is_an_equilibrium(self) -> None:
        self.assertEqual("p_stop", self.branch.termination)
        for point in self.branch.points:
            report = verify_equilibrium(self.terms, embed_free(self.terms, point.x_free), point.pot, epsilon=self.branch.epsilon)
            self.assertTrue(report.passed, msg=f"P={point.pot} violations={report.violations}")
            self.assertLessEqual(float(report.exploitability.max()), 1e-3)

    def test_boundary_law(self) -> None:
        passed = checked = 0
        for point in self.branch.points:
            f = self.system.assemble_f(self.system.embed(point.x_free), point.pot)
            report = asymptotic_boundary_check(point.x_free, point.pot, self.branch.epsilon, f)
            passed += int(np.count_nonzero(report.passed_mask))
            checked += report.n_checked
        self.assertGreater(checked, 0)
        self.assertGreaterEqual(passed / checked, 0.95)

    def test_consecutive_points_respect_the_step(self) -> None:
        states = self.branch.states()
        chords = np.linalg.norm(np.diff(states, axis=0), axis=1)
        deltas = np.array([p.delta_used for p in self.branch.points[2:]])
        self.assertTrue(np.all(chords[1:] <= np.maximum(1.05 * deltas, 1e-3 * self.branch.epsilon)))


@SLOW
class TestFiveCardBranch(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.spec = GameSpec(n_cards=5)
        cls.terms = build_terms(cls.spec)
        cls.branch = trace_branch(cls.spec, ContinuationConfig())

    def test_every_point_is_an_equilibrium(self) -> None:
        for point in self.branch.points:
            report = verify_equilibrium(self.terms, embed_free(self.terms, point.x_free), point.pot, epsilon=self.branch.epsilon)
            self.assertTrue(report.passed, msg=f"P={point.pot} violations={report.violations}")

    def test_coexisting_solutions(self) -> None:
        _, count = max_multiplicity(self.branch, bin_width=1e-3)
        self.assertGreaterEqual(count, 3)


@SLOW
class TestSingleMechanism(unittest.TestCase):
    def test_dominance_only_matches_ancestor_only(self) -> None:
        config = ContinuationConfig(p_stop=3.6)
        dominance_only = trace_branch(GameSpec(n_cards=4), dataclasses.replace(config, ancestor_rule=False))
        ancestor_only = trace_branch(GameSpec(n_cards=4, dominance_fixing=False), config)
        for pot in (1.0, 2.2, 2.5, 2.8, 3.5):
            first = coexisting_solutions(dominance_only, pot)[0]
            second = coexisting_solutions(ancestor_only, pot)[0]
            assert_allclose(first, second, rtol=0.0, atol=1e-3, err_msg=f"P={pot}")


@SLOW
class TestJacobianSweep(unittest.TestCase):
    def test_hundred_random_points(self) -> None:
        rng = np.random.default_rng(100)
        for n_cards in (4, 5):
            system = system_for(build_terms(GameSpec(n_cards=n_cards)))
            for _ in range(50):
                x_free = rng.uniform(0.05, 0.95, size=system.size)
                P = float(rng.uniform(0.5, 10.0))
                _, jac = system.residual_and_jacobian(x_free, P, 1e-2)
                assert_allclose(jac, _fd_jacobian(system, x_free, P, 1e-2), rtol=1e-5, atol=1e-6)


@SLOW
class TestCommandLine(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self._old = os.environ.get("KUHN3_SHOW_PROGRESS")
        os.environ["KUHN3_SHOW_PROGRESS"] = "0"

    def tearDown(self) -> None:
        if self._old is None:
            os.environ.pop("KUHN3_SHOW_PROGRESS", None)
        else:
            os.environ["KUHN3_SHOW_PROGRESS"] = self._old
        self._tmp.cleanup()

    def _run(self, *argv: str) -> int:
        with contextlib.redirect_stdout(io.StringIO()):
            return run_cli(list(argv))

    def test_five_card_trace_is_byte_identical(self) -> None:
        for name in ("a", "b"):
            self.assertEqual(0, self._run("trace", "--cards", "5", "--seed", "7", "--out", str(self.tmp / name)))
        self.assertEqual((self.tmp / "a" / "branch.csv").read_bytes(), (self.tmp / "b" / "branch.csv").read_bytes())

    def test_trace_then_verify(self) -> None:
        self.assertEqual(0, self._run("trace", "--cards", "4", "--pot-max", "3", "--out", str(self.tmp / "n4")))
        self.assertEqual(0, self._run("verify", "--in", str(self.tmp / "n4" / "branch.csv")))


if __name__ == "__main__":
    unittest.main()
