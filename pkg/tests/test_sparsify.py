"""Threshold calibration and mask application."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spon.model import LinearSite, ModelConfig, ModelWeights, forward
from spon.sparsify import (
    SparsityAccounting,
    SparsityProfile,
    apply_mask,
    calibrate_thresholds,
    measure_sparsity,
    quantile_threshold,
    sparse_forward,
)


@pytest.fixture(scope="module")
def cfg():
    return ModelConfig(d_model=32, n_layers=2, n_heads=2, d_ff=48, context_len=32, seed=21)


@pytest.fixture(scope="module")
def weights(cfg):
    return ModelWeights.init_random(cfg)


@pytest.fixture(scope="module")
def calib(cfg):
    from spon.corpus import default_corpus
    return default_corpus(size=4096, seed=22)


class TestApplyMask:
    def test_tau_zero_keeps_nonzeros(self):
        x = np.array([0.0, -0.5, 2.0, 0.0], dtype=np.float32)
        out = apply_mask(x, 0.0)
        np.testing.assert_array_equal(out, x)

    def test_hand_example(self):
        out = apply_mask(np.array([0.2, -0.6, 0.05], dtype=np.float32), 0.1)
        np.testing.assert_array_equal(out, np.array([0.2, -0.6, 0.0], dtype=np.float32))

    def test_boundary_is_masked(self):
        out = apply_mask(np.array([0.1, 0.10001], dtype=np.float32), 0.1)
        assert out[0] == 0.0 and out[1] != 0.0

    @given(st.lists(st.floats(-10, 10, width=32), min_size=1, max_size=40),
           st.floats(0, 5))
    @settings(max_examples=60, deadline=None)
    def test_idempotent_and_exactly_sparse(self, values, tau):
        x = np.asarray(values, dtype=np.float32)
        once = apply_mask(x, tau)
        twice = apply_mask(once, tau)
        assert once.tobytes() == twice.tobytes()
        assert np.all(once[np.abs(x) <= tau] == 0.0)

    @given(st.lists(st.floats(-10, 10, width=32), min_size=1, max_size=40),
           st.floats(0, 5), st.floats(0, 5))
    @settings(max_examples=60, deadline=None)
    def test_support_monotone_in_tau(self, values, tau_a, tau_b):
        lo, hi = sorted((tau_a, tau_b))
        x = np.asarray(values, dtype=np.float32)
        support_hi = apply_mask(x, hi) != 0
        support_lo = apply_mask(x, lo) != 0
        assert np.all(~support_hi | support_lo)

    def test_negative_tau_rejected(self):
        with pytest.raises(ValueError):
            apply_mask(np.ones(3), -0.1)


class TestQuantile:
    def test_target_zero(self):
        assert quantile_threshold(np.array([0.3, 0.9]), 0.0) == 0.0

    def test_hand_multiset(self):
        pooled = np.array([0.1, 0.5, 0.3, 0.05])
        tau = quantile_threshold(pooled, 0.5)
        assert tau == pytest.approx(0.1)
        masked = np.abs(pooled) <= tau
        assert masked.sum() == 2

    def test_uniform_sampling_oracle(self):
        rng = np.random.default_rng(23)
        x = rng.uniform(0, 1, size=200_000)
        assert quantile_threshold(x, 0.5) == pytest.approx(0.5, abs=0.02)


class TestCalibration:
    def test_achieved_fraction_within_one_percent(self, cfg, weights, calib):
        sites = cfg.all_sites()
        for target in (0.25, 0.5, 0.6):
            profile = calibrate_thresholds(weights, cfg, calib, sites, target)
            from spon.sparsify import collect_site_inputs
            captured, _ = collect_site_inputs(weights, cfg, calib, sites)
            masked = total = 0
            for site, x in captured.items():
                masked += int((np.abs(x) <= profile.thresholds[site]).sum())
                total += x.size
            assert abs(masked / total - target) <= 0.01

    def test_target_zero_gives_zero_taus(self, cfg, weights, calib):
        profile = calibrate_thresholds(weights, cfg, calib, cfg.all_sites(), 0.0)
        assert all(tau == 0.0 for tau in profile.thresholds.values())

    def test_too_few_tokens(self, cfg, weights):
        with pytest.raises(ValueError, match="1024"):
            calibrate_thresholds(weights, cfg, b"x" * 512, cfg.all_sites(), 0.5)

    def test_empty_sites(self, cfg, weights, calib):
        with pytest.raises(ValueError):
            calibrate_thresholds(weights, cfg, calib, [], 0.5)

    def test_profile_json_round_trip(self, cfg, weights, calib):
        profile = calibrate_thresholds(weights, cfg, calib, cfg.all_sites(), 0.5)
        back = SparsityProfile.from_json_dict(profile.to_json_dict())
        assert back.target_sparsity == profile.target_sparsity
        assert back.thresholds == profile.thresholds
        assert back.metadata == profile.metadata


class TestSparseForward:
    def test_empty_profile_bit_equal_dense(self, cfg, weights):
        ids = np.random.default_rng(1).integers(0, 256, size=(2, 16))
        profile = SparsityProfile(target_sparsity=0.0, thresholds={})
        dense = forward(weights, cfg, ids)
        sparse = sparse_forward(weights, cfg, ids, profile)
        assert dense.tobytes() == sparse.tobytes()

    def test_zero_thresholds_bit_equal_dense(self, cfg, weights):
        ids = np.random.default_rng(2).integers(0, 256, size=(2, 16))
        profile = SparsityProfile(
            target_sparsity=0.0, thresholds={s: 0.0 for s in cfg.all_sites()}
        )
        dense = forward(weights, cfg, ids)
        sparse = sparse_forward(weights, cfg, ids, profile)
        assert dense.tobytes() == sparse.tobytes()

    def test_half_sparsity_measured_fraction(self, cfg, weights, calib):
        profile = calibrate_thresholds(weights, cfg, calib, cfg.all_sites(), 0.5)
        acc = SparsityAccounting()
        ids = np.frombuffer(calib[:512], dtype=np.uint8).reshape(-1, 32).astype(np.int64)
        sparse_forward(weights, cfg, ids, profile, accounting=acc)
        stats = measure_sparsity(acc)
        assert abs(stats.overall - 0.5) <= 0.02

    def test_unknown_site_rejected(self, cfg, weights):
        profile = SparsityProfile(
            target_sparsity=0.1, thresholds={LinearSite(7, "down_proj"): 0.1}
        )
        with pytest.raises(ValueError):
            sparse_forward(weights, cfg, np.zeros((1, 4), dtype=np.int64), profile)


class TestMeasureSparsity:
    def test_tau_zero_masks_nothing(self, cfg, weights, calib):
        profile = SparsityProfile(
            target_sparsity=0.0, thresholds={s: 0.0 for s in cfg.all_sites()}
        )
        acc = SparsityAccounting()
        ids = np.frombuffer(calib[:256], dtype=np.uint8).reshape(-1, 32).astype(np.int64)
        sparse_forward(weights, cfg, ids, profile, accounting=acc)
        assert measure_sparsity(acc).overall <= 1e-4  # modulo exact-zero inputs

    def test_huge_tau_masks_everything(self, cfg, weights, calib):
        profile = SparsityProfile(
            target_sparsity=0.0, thresholds={s: 1e30 for s in cfg.all_sites()}
        )
        acc = SparsityAccounting()
        ids = np.frombuffer(calib[:256], dtype=np.uint8).reshape(-1, 32).astype(np.int64)
        sparse_forward(weights, cfg, ids, profile, accounting=acc)
        assert measure_sparsity(acc).overall == 1.0

    def test_empty_accounting_rejected(self):
        with pytest.raises(ValueError):
            measure_sparsity(SparsityAccounting())
