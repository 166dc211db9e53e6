import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shapefuse.errors import InputError
from shapefuse.gating import (
    FusionResult,
    GatingMasks,
    SsimParams,
    aggregate_channels,
    apply_gating,
    compute_gating_masks,
    fuse_pair,
    fused_feature,
    normalize_masks,
    raw_masks,
    window_stats,
)
from shapefuse.gradients import GradientField, gradient_field
from shapefuse.tensor_io import MultispectralPair

import oracles
from conftest import random_pair


def make_field(grad_rgb, grad_t):
    """Assemble a GradientField directly from prepared gradient maps."""
    ref_raw = np.maximum(grad_rgb, grad_t)
    from shapefuse.gradients import boost

    big = float(ref_raw.max())
    return GradientField(
        grad_rgb=np.asarray(grad_rgb, dtype=np.float64),
        grad_t=np.asarray(grad_t, dtype=np.float64),
        ref_raw=ref_raw,
        ref_boosted=boost(ref_raw),
        dynamic_range=big if big > 0 else 1.0,
    )


class TestSsimParams:
    def test_derived_constants(self):
        p = SsimParams(L=10.0)
        assert p.xi1 == pytest.approx((0.01 * 10.0) ** 2)
        assert p.xi2 == pytest.approx((0.03 * 10.0) ** 2)

    @pytest.mark.parametrize("kwargs", [
        {"L": 1.0, "window": 4},
        {"L": 1.0, "window": 1},
        {"L": 0.0},
        {"L": -2.0},
        {"L": 1.0, "k1": 0.0},
        {"L": 1.0, "k2": -0.5},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(InputError):
            SsimParams(**kwargs)


class TestWindowStats:
    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        g_rgb = rng.random((12, 12)) * 4.0
        g_t = rng.random((12, 12)) * 4.0
        field = make_field(g_rgb, g_t)
        params = SsimParams(L=field.dynamic_range, window=7)
        stats = window_stats(field, params)
        mu_x, mu_ref, var_x, var_ref, cov = oracles.window_stats_scalar(
            g_rgb, field.ref_boosted, 7
        )
        np.testing.assert_allclose(stats.mu_rgb, mu_x, atol=1e-5)
        np.testing.assert_allclose(stats.mu_ref, mu_ref, atol=1e-5)
        np.testing.assert_allclose(stats.var_rgb, var_x, atol=1e-5)
        np.testing.assert_allclose(stats.var_ref, var_ref, atol=1e-5)
        np.testing.assert_allclose(stats.cov_rgb_ref, cov, atol=1e-5)

    @pytest.mark.parametrize("window", [3, 5])
    def test_other_windows(self, window):
        rng = np.random.default_rng(1)
        g_rgb = rng.random((9, 10)) * 2.0
        g_t = rng.random((9, 10)) * 2.0
        field = make_field(g_rgb, g_t)
        stats = window_stats(field, SsimParams(L=field.dynamic_range, window=window))
        mu_t, mu_ref, var_t, var_ref, cov_t = oracles.window_stats_scalar(
            g_t, field.ref_boosted, window
        )
        np.testing.assert_allclose(stats.mu_t, mu_t, atol=1e-5)
        np.testing.assert_allclose(stats.var_t, var_t, atol=1e-5)
        np.testing.assert_allclose(stats.cov_t_ref, cov_t, atol=1e-5)

    def test_constant_maps(self):
        field = make_field(np.full((8, 8), 2.5), np.full((8, 8), 1.5))
        stats = window_stats(field, SsimParams(L=field.dynamic_range, window=3))
        np.testing.assert_allclose(stats.mu_rgb, 2.5, atol=1e-12)
        np.testing.assert_allclose(stats.mu_t, 1.5, atol=1e-12)
        np.testing.assert_allclose(stats.sigma_rgb, 0.0, atol=1e-9)
        np.testing.assert_allclose(stats.cov_rgb_ref, 0.0, atol=1e-9)

    def test_self_covariance_equals_variance(self):
        rng = np.random.default_rng(2)
        g = rng.random((10, 10)) * 3.0
        # Force grad_rgb == ref_boosted by making both maps identical and
        # pre-boosted (max-pool of a max-pooled map grows, so build directly).
        from shapefuse.gradients import boost

        boosted = boost(g)
        field = GradientField(
            grad_rgb=boosted, grad_t=boosted, ref_raw=boosted,
            ref_boosted=boosted, dynamic_range=float(boosted.max()),
        )
        stats = window_stats(field, SsimParams(L=field.dynamic_range, window=5))
        np.testing.assert_allclose(stats.cov_rgb_ref, stats.sigma_rgb**2, atol=1e-9)

    def test_cauchy_schwarz(self):
        rng = np.random.default_rng(3)
        field = make_field(rng.random((16, 16)) * 5, rng.random((16, 16)) * 5)
        stats = window_stats(field, SsimParams(L=field.dynamic_range))
        bound = stats.sigma_rgb * stats.sigma_ref + 1e-5
        assert (np.abs(stats.cov_rgb_ref) <= bound).all()

    def test_window_too_large(self):
        field = make_field(np.zeros((6, 6)), np.zeros((6, 6)))
        with pytest.raises(InputError, match="window"):
            window_stats(field, SsimParams(L=1.0, window=7))


class TestRawMasks:
    def test_identical_map_scores_one(self):
        rng = np.random.default_rng(4)
        g = rng.random((10, 10)) * 3.0
        from shapefuse.gradients import boost

        boosted = boost(g)
        field = GradientField(
            grad_rgb=boosted, grad_t=boosted, ref_raw=boosted,
            ref_boosted=boosted, dynamic_range=float(boosted.max()),
        )
        params = SsimParams(L=field.dynamic_range)
        m_rgb, m_t = raw_masks(window_stats(field, params), params)
        np.testing.assert_allclose(m_rgb, 1.0, atol=1e-12)
        np.testing.assert_allclose(m_t, 1.0, atol=1e-12)

    def test_flat_zero_gradients_score_one(self):
        field = make_field(np.zeros((8, 8)), np.zeros((8, 8)))
        params = SsimParams(L=field.dynamic_range)
        m_rgb, m_t = raw_masks(window_stats(field, params), params)
        np.testing.assert_allclose(m_rgb, 1.0, atol=1e-12)
        np.testing.assert_allclose(m_t, 1.0, atol=1e-12)

    def test_edge_favors_structured_modality(self):
        rgb = np.zeros((3, 16, 16), dtype=np.float32)
        rgb[:, :, 8:] = 1.0
        thermal = np.full((16, 16), 0.5, dtype=np.float32)
        pair = MultispectralPair(rgb=rgb, thermal=thermal)
        field = gradient_field(pair.rgb, pair.thermal)
        params = SsimParams(L=field.dynamic_range)
        m_rgb, m_t = raw_masks(window_stats(field, params), params)
        band = slice(6, 10)
        assert (m_rgb[:, band] > m_t[:, band]).all()

    def test_matches_scalar_expression(self):
        rng = np.random.default_rng(5)
        field = make_field(rng.random((9, 9)) * 2, rng.random((9, 9)) * 2)
        params = SsimParams(L=field.dynamic_range)
        stats = window_stats(field, params)
        m_rgb, _ = raw_masks(stats, params)
        for y in range(0, 9, 3):
            for x in range(0, 9, 3):
                expected = oracles.ssim_scalar(
                    stats.mu_rgb[y, x], stats.var_rgb[y, x], stats.cov_rgb_ref[y, x],
                    stats.mu_ref[y, x], stats.var_ref[y, x], params.xi1, params.xi2,
                )
                assert m_rgb[y, x] == pytest.approx(expected, abs=1e-12)


class TestNormalizeMasks:
    def test_equal_raw_gives_half(self):
        raw = np.random.default_rng(6).random((5, 5))
        masks = normalize_masks(raw, raw.copy())
        np.testing.assert_array_equal(masks.m_rgb, 0.5)
        np.testing.assert_array_equal(masks.m_t, 0.5)

    def test_hand_example(self):
        masks = normalize_masks(np.array([[1.0]]), np.array([[-1.0]]))
        expected = math.exp(1) / (math.exp(1) + math.exp(-1))
        assert masks.m_rgb[0, 0] == pytest.approx(expected, abs=1e-6)
        assert masks.m_rgb[0, 0] == pytest.approx(0.8808, abs=1e-4)

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        a = rng.random((6, 6))
        b = rng.random((6, 6))
        base = normalize_masks(a, b)
        shifted = normalize_masks(a + 0.73, b + 0.73)
        np.testing.assert_allclose(base.m_rgb, shifted.m_rgb, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            normalize_masks(np.zeros((2, 2)), np.zeros((3, 2)))

    @settings(max_examples=50, deadline=None)
    @given(
        raw=arrays(np.float64, (4, 5), elements=st.floats(-1.0, 1.0)),
        raw2=arrays(np.float64, (4, 5), elements=st.floats(-1.0, 1.0)),
    )
    def test_partition_of_unity_property(self, raw, raw2):
        masks = normalize_masks(raw, raw2)
        total = masks.m_rgb.astype(np.float64) + masks.m_t.astype(np.float64)
        assert np.abs(total - 1.0).max() <= 1e-6


class TestApplyGating:
    def test_uniform_half(self):
        rng = np.random.default_rng(8)
        pair = random_pair(rng, 8, 8)
        half = np.full((8, 8), 0.5, dtype=np.float32)
        masks = GatingMasks(m_raw_rgb=half, m_raw_t=half, m_rgb=half, m_t=half)
        gated_rgb, gated_t = apply_gating(pair, masks)
        np.testing.assert_allclose(gated_rgb, pair.rgb * 0.5, atol=1e-7)
        np.testing.assert_allclose(gated_t, pair.thermal * 0.5, atol=1e-7)

    def test_hard_gate(self):
        rng = np.random.default_rng(9)
        pair = random_pair(rng, 6, 6)
        ones = np.ones((6, 6), dtype=np.float32)
        zeros = np.zeros((6, 6), dtype=np.float32)
        masks = GatingMasks(m_raw_rgb=ones, m_raw_t=zeros, m_rgb=ones, m_t=zeros)
        gated_rgb, gated_t = apply_gating(pair, masks)
        np.testing.assert_array_equal(gated_rgb, pair.rgb)
        np.testing.assert_array_equal(gated_t, 0.0)

    def test_elementwise_products(self):
        rng = np.random.default_rng(10)
        pair = random_pair(rng, 5, 7)
        masks = compute_gating_masks(pair, window=3)
        gated_rgb, gated_t = apply_gating(pair, masks)
        for c in range(3):
            for y in range(5):
                for x in range(7):
                    assert gated_rgb[c, y, x] == pytest.approx(
                        float(pair.rgb[c, y, x]) * float(masks.m_rgb[y, x]), abs=1e-7
                    )
        for y in range(5):
            for x in range(7):
                assert gated_t[y, x] == pytest.approx(
                    float(pair.thermal[y, x]) * float(masks.m_t[y, x]), abs=1e-7
                )

    def test_shape_mismatch(self):
        rng = np.random.default_rng(11)
        pair = random_pair(rng, 8, 8)
        wrong = np.full((4, 4), 0.5, dtype=np.float32)
        masks = GatingMasks(m_raw_rgb=wrong, m_raw_t=wrong, m_rgb=wrong, m_t=wrong)
        with pytest.raises(InputError):
            apply_gating(pair, masks)


class TestFullPipeline:
    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(12)
        for _ in range(3):
            pair = random_pair(rng, 16, 16)
            masks = compute_gating_masks(pair)
            ref_raw_rgb, ref_raw_t, ref_rgb, ref_t = oracles.mask_pipeline_reference(
                pair.rgb, pair.thermal
            )
            np.testing.assert_allclose(masks.m_raw_rgb, ref_raw_rgb, atol=1e-5)
            np.testing.assert_allclose(masks.m_raw_t, ref_raw_t, atol=1e-5)
            np.testing.assert_allclose(masks.m_rgb, ref_rgb, atol=1e-5)
            np.testing.assert_allclose(masks.m_t, ref_t, atol=1e-5)

    def test_fuse_pair_bundles_consistent_outputs(self):
        rng = np.random.default_rng(13)
        pair = random_pair(rng, 12, 12)
        result = fuse_pair(pair)
        assert isinstance(result, FusionResult)
        masks = compute_gating_masks(pair)
        np.testing.assert_array_equal(result.masks.m_rgb, masks.m_rgb)
        gated_rgb, gated_t = apply_gating(pair, masks)
        np.testing.assert_array_equal(result.gated_rgb, gated_rgb)
        np.testing.assert_array_equal(result.gated_thermal, gated_t)

    def test_raw_mask_range(self):
        rng = np.random.default_rng(14)
        for _ in range(5):
            pair = random_pair(rng, 10, 14)
            masks = compute_gating_masks(pair, window=5)
            for raw in (masks.m_raw_rgb, masks.m_raw_t):
                assert raw.min() >= -1.0 - 1e-5
                assert raw.max() <= 1.0 + 1e-5


class TestFusedFeature:
    def test_selector_kernel(self):
        rng = np.random.default_rng(15)
        gated = rng.random((4, 6, 6)).astype(np.float32)
        w = np.zeros((1, 4, 1, 1), dtype=np.float32)
        w[0, 0, 0, 0] = 1.0
        out = fused_feature(gated, w)
        np.testing.assert_allclose(out[0], gated[0], atol=1e-7)

    def test_zero_weights(self):
        gated = np.ones((4, 5, 5), dtype=np.float32)
        out = fused_feature(gated, np.zeros((2, 4, 3, 3), dtype=np.float32))
        np.testing.assert_array_equal(out, 0.0)

    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(16)
        gated = rng.random((4, 9, 9))
        w = rng.standard_normal((3, 4, 3, 3))
        b = rng.standard_normal(3)
        out = fused_feature(gated, w, b)
        expected = oracles.conv2d_scalar(gated, w, b)
        np.testing.assert_allclose(out, expected, atol=1e-5)

    def test_even_kernel_rejected(self):
        with pytest.raises(InputError, match="odd"):
            fused_feature(np.zeros((4, 5, 5)), np.zeros((1, 4, 2, 2)))

    def test_channel_mismatch(self):
        with pytest.raises(InputError, match="channels"):
            fused_feature(np.zeros((3, 5, 5)), np.zeros((1, 4, 3, 3)))

    def test_bad_bias(self):
        with pytest.raises(InputError, match="bias"):
            fused_feature(np.zeros((4, 5, 5)), np.zeros((2, 4, 1, 1)), np.zeros(3))

    def test_non_finite_weights(self):
        w = np.zeros((1, 4, 1, 1))
        w[0, 0, 0, 0] = np.inf
        with pytest.raises(InputError, match="finite"):
            fused_feature(np.zeros((4, 5, 5)), w)


class TestAggregateChannels:
    def test_single_channel_identity(self):
        rng = np.random.default_rng(17)
        f = rng.random((1, 4, 4)).astype(np.float32)
        np.testing.assert_allclose(aggregate_channels(f), f[0], atol=1e-7)

    def test_equal_channels(self):
        f = np.full((5, 3, 3), 2.25, dtype=np.float32)
        np.testing.assert_allclose(aggregate_channels(f), 2.25, atol=1e-6)

    def test_hand_example(self):
        f = np.zeros((2, 1, 1))
        f[1, 0, 0] = 10.0
        out = aggregate_channels(f)
        expected = 10.0 * math.exp(10) / (1.0 + math.exp(10))
        assert out[0, 0] == pytest.approx(expected, abs=1e-4)
        assert out[0, 0] == pytest.approx(9.9995, abs=1e-3)

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(18)
        f = rng.standard_normal((6, 7, 7))
        out = aggregate_channels(f)
        assert (out >= f.min(axis=0) - 1e-6).all()
        assert (out <= f.max(axis=0) + 1e-6).all()

    def test_empty_depth_rejected(self):
        with pytest.raises(InputError):
            aggregate_channels(np.zeros((0, 4, 4)))
