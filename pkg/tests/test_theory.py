"""Breakpoint counting and the structured-vs-unstructured expressivity gap."""

import numpy as np
import pytest

from spon.theory import (
    ReluSum,
    best_structured_fit,
    construct_gm,
    count_pieces,
    default_grid,
    inclusion_demo,
)


class TestReluSum:
    def test_breakpoints_must_increase(self):
        with pytest.raises(ValueError):
            ReluSum((1.0, 1.0), (2.0, 1.0))

    def test_evaluate_hand_value(self):
        f = ReluSum((2.0,), (1.0,), offset=3.0)
        np.testing.assert_allclose(f.evaluate(np.array([0.0, 1.0, 2.5])), [3.0, 3.0, 6.0])

    def test_zero_padding_changes_nothing_exactly(self):
        f = construct_gm(3, seed=5)
        padded = f.pad_with_zero_units(4)
        grid = default_grid(padded)
        assert np.max(np.abs(padded.evaluate(grid) - f.evaluate(grid))) == 0.0
        assert padded.first_layer_nonzeros() == f.first_layer_nonzeros()


class TestConstruct:
    def test_m1_single_slope_change(self):
        f = construct_gm(1, seed=0)
        assert count_pieces(f) == 2

    def test_m3_piece_count(self):
        f = construct_gm(3, seed=0)
        assert count_pieces(f) == 4

    def test_nonzero_budget_is_2m(self):
        for m in (1, 2, 5, 9):
            assert construct_gm(m, seed=1).first_layer_nonzeros() == 2 * m

    def test_slopes_genuinely_nonzero(self):
        f = construct_gm(6, seed=2)
        assert all(abs(a) >= 0.5 for a in f.slopes)

    def test_m_zero_rejected(self):
        with pytest.raises(ValueError):
            construct_gm(0)


class TestCountPieces:
    def test_all_positive_slopes(self):
        f = ReluSum((1.0, 2.0, 0.5), (0.0, 1.0, 2.0))
        assert count_pieces(f) == 4

    def test_flat_tails_are_distinct_pieces(self):
        # slopes 0, 1, 0: both breakpoints are genuine
        f = ReluSum((1.0, -1.0), (0.0, 1.0))
        assert count_pieces(f) == 3

    def test_zero_slope_unit_does_not_add_a_piece(self):
        f = ReluSum((1.0, 2.0), (0.0, 2.0))
        with_dud = ReluSum((1.0, 0.0, 2.0), (0.0, 1.0, 2.0))
        assert count_pieces(with_dud) == count_pieces(f) == 3

    def test_grid_must_cover_breakpoints(self):
        f = ReluSum((1.0, 1.0), (0.0, 5.0))
        with pytest.raises(ValueError, match="span"):
            count_pieces(f, np.linspace(-1, 3, 200))

    def test_grid_density_precondition(self):
        f = construct_gm(4, seed=3)
        with pytest.raises(ValueError, match="coarse"):
            count_pieces(f, np.linspace(0, 5, 20))

    def test_piece_count_matches_m_plus_1(self):
        for m in (1, 2, 3, 4, 6, 8):
            for seed in (0, 1, 2):
                assert count_pieces(construct_gm(m, seed=seed)) == m + 1


class TestStructuredFit:
    def test_full_width_recovers_exactly(self):
        f = construct_gm(4, seed=4)
        _, err = best_structured_fit(f, 4)
        assert err <= 1e-9

    def test_dropping_a_genuine_breakpoint_costs_error(self):
        f = construct_gm(4, seed=4)
        _, err = best_structured_fit(f, 3)
        assert err > 1e-3

    def test_removable_zero_unit(self):
        f = ReluSum((1.0, 0.0, -2.0), (0.0, 1.0, 2.0), offset=0.5)
        _, err = best_structured_fit(f, 2)
        assert err <= 1e-9

    def test_error_non_increasing_in_width(self):
        for seed in range(6):
            f = construct_gm(5, seed=seed)
            errs = [best_structured_fit(f, mp)[1] for mp in range(1, 6)]
            for wider, narrower in zip(errs[1:], errs[:-1]):
                assert wider <= narrower + 1e-12

    def test_invalid_width(self):
        f = construct_gm(3, seed=0)
        with pytest.raises(ValueError):
            best_structured_fit(f, 0)
        with pytest.raises(ValueError):
            best_structured_fit(f, 4)


class TestInclusionDemo:
    def test_smallest_case(self):
        report = inclusion_demo(2, 1, seed=0)
        assert report["embed_ok"] is True
        assert report["embed_gap"] == 0.0
        assert report["piece_count"] == 3
        assert report["struct_linf_error"] > 0
        assert report["K"] == 4 == report["first_layer_nonzeros"]

    def test_m_prime_zero_excluded(self):
        with pytest.raises(ValueError):
            inclusion_demo(3, 0)

    def test_m_prime_must_be_smaller(self):
        with pytest.raises(ValueError):
            inclusion_demo(3, 3)

    def test_report_schema(self):
        report = inclusion_demo(4, 3, seed=1)
        assert set(report) == {
            "schema_version", "m", "m_prime", "K", "first_layer_nonzeros",
            "embed_ok", "embed_gap", "piece_count", "struct_linf_error", "seed",
        }
        import json
        assert json.loads(json.dumps(report)) == report
