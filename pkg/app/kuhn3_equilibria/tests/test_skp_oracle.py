import math
import unittest

import numpy as np
from numpy.testing import assert_allclose

from kuhn3_equilibria.continuation import Branch, BranchPoint, ContinuationConfig
from kuhn3_equilibria.equilibrium_system import system_for, verify_equilibrium
from kuhn3_equilibria.errors import SolverError
from kuhn3_equilibria.game_model import GameSpec, build_terms, evaluate_expectations
from kuhn3_equilibria.skp_oracle import (
    BRACKET_MARGIN,
    SKP_UNKNOWNS,
    SKPState,
    compare_embedding,
    embed_skp,
    extract_skp,
    skp_correction,
    skp_f,
    skp_fixed_point_map,
    skp_leading_state,
    skp_limit_X,
    skp_positions,
    skp_regularized_guess,
    skp_row_scales,
    skp_solution1,
    solution1_closed_form,
)

SKP_SPEC = GameSpec(n_cards=4, variant="skp")


def _pos(name: str) -> int:
    return SKP_UNKNOWNS.index(name)


class TestClosedForms(unittest.TestCase):
    def test_skp_f_at_zero_state(self) -> None:
        zero = SKPState(tuple([0.0] * 11), 2.0)
        f = skp_f(zero)
        self.assertEqual(0.0, f[0])
        self.assertEqual(0.0, f[2])
        for P in (0.0, 2.5, 7.0):
            self.assertEqual(-2.0, skp_f(SKPState(tuple([0.0] * 11), P))[8])

    def test_solution1_values(self) -> None:
        at2 = solution1_closed_form(2.0)
        self.assertAlmostEqual(2.0 / 3.0, at2.b3)
        self.assertEqual(0.0, at2.d2)
        self.assertEqual((0.0, 2.0 / 3.0), (at2.lower, at2.upper))

        at3 = solution1_closed_form(3.0)
        self.assertEqual(0.5, at3.b3)
        self.assertEqual(0.5, at3.d2)
        self.assertEqual(at3.lower, at3.upper)

        mid = solution1_closed_form(2.5)
        self.assertAlmostEqual(4.0 / 7.0, mid.b3)
        self.assertAlmostEqual(2.0 / 7.0, mid.d2)

    def test_solution1_domain(self) -> None:
        with self.assertRaises(ValueError):
            solution1_closed_form(1.9)
        with self.assertRaises(ValueError):
            skp_solution1(2.5, interior_sums=(0.1, 0.4))

    def test_solution1_satisfies_the_conditions(self) -> None:
        state = skp_solution1(2.5)
        f = skp_f(state)
        for name in ("c2", "d3", "c3", "d1", "d2", "b3"):
            self.assertAlmostEqual(0.0, f[_pos(name)], places=12)
        for name in ("b1", "a1", "b2", "a2", "c1"):
            self.assertEqual(0.0, state[name])
            self.assertLess(f[_pos(name)], 0.0)

    def test_limit_X_is_inside_the_bounds(self) -> None:
        X = skp_limit_X(2.5)
        self.assertTrue(2.0 / 7.0 < X < 4.0 / 7.0)
        self.assertAlmostEqual(X, skp_fixed_point_map(X, 2.5), places=12)

    def test_fixed_point_map_is_strictly_decreasing(self) -> None:
        scales = np.linspace(0.5, 1.5, 11)
        for P in (2.2, 2.5, 2.8):
            lower, upper = (2 * P - 4) / (P + 1), 2 / (P + 1)
            samples = np.linspace(lower + BRACKET_MARGIN, upper - BRACKET_MARGIN, 100)
            for block in (1, 2):
                for row_scales in (None, scales):
                    F = [skp_fixed_point_map(float(X), P, row_scales=row_scales, block=block) for X in samples]
                    self.assertTrue(np.all(np.diff(F) < 0.0), msg=f"P={P} block={block}")

    def test_limit_X_needs_open_interval(self) -> None:
        with self.assertRaises(ValueError):
            skp_limit_X(3.0)

    def test_corrections(self) -> None:
        corrections = skp_correction(2.5)
        self.assertAlmostEqual(1.75 / math.pi, corrections[_pos("c1")], places=12)
        self.assertTrue(math.isfinite(corrections[_pos("a1")]))
        self.assertGreater(corrections[_pos("a1")], 0.0)
        for name in ("c2", "d3", "c3", "d1"):
            self.assertTrue(math.isnan(corrections[_pos(name)]))

    def test_correction_rejects_sum_on_bound(self) -> None:
        state = skp_solution1(2.5, interior_sums=(4.0 / 7.0, 3.0 / 7.0))
        with self.assertRaises(ValueError):
            skp_correction(2.5, state)

    def test_row_scales_change_the_leading_state(self) -> None:
        scales = np.ones(11)
        scales[_pos("c2")] = 2.0
        plain = skp_leading_state(2.5)
        scaled = skp_leading_state(2.5, row_scales=scales)
        self.assertNotAlmostEqual(plain["c2"], scaled["c2"])
        self.assertEqual(plain["b3"], scaled["b3"])


class TestEmbedding(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.terms = build_terms(SKP_SPEC)
        cls.system = system_for(cls.terms)
        cls.scales = skp_row_scales(cls.system)

    def test_embed_then_extract(self) -> None:
        state = skp_solution1(2.5)
        x_free = embed_skp(state, self.system.free_indices)
        self.assertEqual((11,), x_free.shape)
        assert_allclose(state.as_array(), extract_skp(x_free, self.system.free_indices))

    def test_embedding_in_the_standard_game(self) -> None:
        free_indices = system_for(build_terms(GameSpec(n_cards=4))).free_indices
        x_free = embed_skp(skp_solution1(2.5), free_indices)
        self.assertEqual((26,), x_free.shape)
        self.assertEqual(6, int(np.count_nonzero(x_free)))

    def test_row_scales_are_positive(self) -> None:
        self.assertEqual((11,), self.scales.shape)
        self.assertTrue(np.all(self.scales > 0.0))

    def test_tree_rows_are_scaled_closed_form_rows(self) -> None:
        rng = np.random.default_rng(17)
        state = SKPState(tuple(rng.uniform(0.1, 0.9, 11)), 2.2)
        x = self.system.embed(embed_skp(state, self.system.free_indices))
        f = self.system.assemble_f(x, 2.2)[skp_positions(self.system.free_indices)]
        assert_allclose(self.scales * skp_f(state), f, rtol=1e-9, atol=1e-12)

    def test_solution1_passes_verification(self) -> None:
        for sums in ((3.0 / 7.0, 3.0 / 7.0), (0.3, 0.55)):
            x = self.system.embed(embed_skp(skp_solution1(2.5, sums), self.system.free_indices))
            report = verify_equilibrium(self.terms, x, 2.5)
            self.assertTrue(report.passed, msg=f"sums={sums} violations={report.violations}")

    def test_regularized_guess_has_small_residual(self) -> None:
        guess = skp_regularized_guess(2.5, 1e-6, row_scales=self.scales)
        x_free = embed_skp(guess, self.system.free_indices)
        self.assertLess(float(np.max(np.abs(self.system.residual(x_free, 2.5, 1e-6)))), 1e-2)


class TestCompareEmbedding(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.system = system_for(build_terms(SKP_SPEC))
        cls.scales = skp_row_scales(cls.system)

    def _branch(self, b3_shift: float = 0.0) -> Branch:
        branch = Branch(
            game_spec=SKP_SPEC,
            epsilon=1e-6,
            config=ContinuationConfig(),
            free_indices=tuple(self.system.free_indices),
        )
        for P in np.linspace(2.1, 2.9, 9):
            values = skp_leading_state(float(P), row_scales=self.scales).as_array()
            values[_pos("b3")] += b3_shift
            x_free = embed_skp(SKPState(tuple(values), float(P)), self.system.free_indices)
            X = np.append(x_free, P)
            E = evaluate_expectations(self.system.terms, self.system.embed(x_free), float(P))
            branch.points.append(BranchPoint(X=X, expectations=E, delta_used=0.1))
        return branch

    def test_leading_states_pass(self) -> None:
        comparison = compare_embedding(self._branch(), row_scales=self.scales)
        self.assertEqual(9, comparison.n_checked)
        self.assertTrue(comparison.passed)
        self.assertLess(comparison.max_deviation("limit_error"), 1e-9)

    def test_shifted_b3_fails(self) -> None:
        comparison = compare_embedding(self._branch(b3_shift=0.01), row_scales=self.scales)
        self.assertFalse(comparison.passed)
        self.assertGreater(comparison.max_deviation("b3_error"), 1e-3)

    def test_needs_four_cards(self) -> None:
        branch = Branch(game_spec=GameSpec(n_cards=5), epsilon=1e-6, config=ContinuationConfig(), free_indices=())
        with self.assertRaises(ValueError):
            compare_embedding(branch)

    def test_solver_error_carries_diagnostics(self) -> None:
        error = SolverError("no sign change in bracket", {"P": 2.5})
        self.assertEqual("no sign change in bracket (P=2.5)", str(error))


if __name__ == "__main__":
    unittest.main()
