from dataclasses import replace

import numpy as np
import pytest

from occreid.encoder import (
    EncoderConfig,
    embed_image,
    encode,
    encoder_flops,
    init_weights,
    mean_cls_attention,
    select_kept,
)
from occreid.exceptions import ConfigurationError, InputError, ShapeError
from occreid.kernels import AttentionOutput


def _image(rng, cfg):
    return rng.integers(0, 256, size=(cfg.image_h, cfg.image_w, cfg.channels), dtype=np.uint8)


class TestConfig:
    def test_default_grid_is_21_by_10(self):
        cfg = EncoderConfig()
        assert (cfg.grid_h, cfg.grid_w) == (21, 10)
        assert cfg.num_patches == 210

    def test_keep_rate_domain(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(keep_rate=0.0)
        with pytest.raises(ConfigurationError):
            EncoderConfig(keep_rate=1.2)

    def test_sparsify_layers_domain(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(layers=4, sparsify_layers=(4,))

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(embed_dim=100, heads=12)


class TestEmbedImage:
    def test_default_patch_count(self):
        # 256x128 with P=16, S=12: 21 * 10 = 210 patches, 211 tokens
        cfg = EncoderConfig(embed_dim=24, mlp_dim=48, heads=4, layers=1, sparsify_layers=())
        w = init_weights(cfg, seed=0)
        rng = np.random.default_rng(0)
        seq = embed_image(_image(rng, cfg), 0, cfg, w)
        assert seq.tokens.shape == (211, 24)
        assert seq.kept_patch_indices.shape == (210,)

    def test_zero_camera_scale_removes_camera_dependence(self, small_config, small_weights, rng):
        cfg = replace(small_config, camera_scale=0.0)
        img = _image(rng, cfg)
        a = embed_image(img, 0, cfg, small_weights)
        b = embed_image(img, 3, cfg, small_weights)
        np.testing.assert_array_equal(a.tokens, b.tokens)

    def test_camera_shifts_all_tokens(self, small_config, small_weights, rng):
        img = _image(rng, small_config)
        a = embed_image(img, 0, small_config, small_weights)
        b = embed_image(img, 3, small_config, small_weights)
        shift = b.tokens - a.tokens
        expected = small_config.camera_scale * (small_weights.camera[3] - small_weights.camera[0])
        np.testing.assert_allclose(shift, np.broadcast_to(expected, shift.shape), atol=1e-6)

    def test_zero_image_zero_tables_gives_bias_rows(self, small_config):
        w = init_weights(small_config, seed=1)
        w.positional = np.zeros_like(w.positional)
        w.camera = np.zeros_like(w.camera)
        w.patch_bias = np.full_like(w.patch_bias, 0.25)
        img = np.zeros((small_config.image_h, small_config.image_w, 3), dtype=np.uint8)
        seq = embed_image(img, 0, small_config, w)
        np.testing.assert_allclose(seq.tokens[1:], 0.25, atol=1e-7)

    def test_camera_out_of_range(self, small_config, small_weights, rng):
        with pytest.raises(InputError):
            embed_image(_image(rng, small_config), small_config.num_cameras, small_config,
                        small_weights)

    def test_wrong_image_shape(self, small_config, small_weights):
        with pytest.raises(ShapeError):
            embed_image(np.zeros((8, 8, 3), dtype=np.uint8), 0, small_config, small_weights)


class TestMeanClsAttention:
    def test_single_head(self):
        row = np.array([0.1, 0.5, 0.4])
        scores = mean_cls_attention(AttentionOutput(np.zeros((3, 4)), [row]))
        np.testing.assert_allclose(scores, [0.5, 0.4])

    def test_two_heads_average(self):
        r1 = np.array([0.2, 0.3, 0.5])
        r2 = np.array([0.4, 0.5, 0.1])
        scores = mean_cls_attention(AttentionOutput(np.zeros((3, 4)), [r1, r2]))
        np.testing.assert_allclose(scores, [(0.3 + 0.5) / 2, (0.5 + 0.1) / 2])

    def test_uniform_rows(self):
        rows = [np.full(5, 0.2) for _ in range(3)]
        scores = mean_cls_attention(AttentionOutput(np.zeros((5, 4)), rows))
        np.testing.assert_allclose(scores, 0.2)


class TestSelectKept:
    def test_keep_count_210(self, rng):
        kept = select_kept(rng.normal(size=210), 0.8, "non_salient", rng)
        assert kept.shape[0] == 168  # ceil(0.8 * 210)

    def test_keep_count_ceiling(self, rng):
        kept = select_kept(rng.normal(size=7), 0.5, "non_salient", rng)
        assert kept.shape[0] == 4  # ceil(3.5)

    @pytest.mark.parametrize("strategy", ["non_salient", "random", "salient"])
    def test_keep_rate_one_keeps_all(self, strategy, rng):
        kept = select_kept(rng.normal(size=9), 1.0, strategy, rng)
        np.testing.assert_array_equal(kept, np.arange(9))

    def test_non_salient_keeps_largest(self, rng):
        scores = rng.normal(size=50)
        kept = select_kept(scores, 0.4, "non_salient", rng)
        dropped = np.setdiff1d(np.arange(50), kept)
        assert scores[kept].min() >= scores[dropped].max()

    def test_salient_keeps_smallest(self, rng):
        scores = rng.normal(size=50)
        kept = select_kept(scores, 0.4, "salient", rng)
        dropped = np.setdiff1d(np.arange(50), kept)
        assert scores[kept].max() <= scores[dropped].min()

    def test_ties_break_to_lower_index(self, rng):
        scores = np.array([1.0, 1.0, 1.0, 1.0])
        kept = select_kept(scores, 0.5, "non_salient", rng)
        np.testing.assert_array_equal(kept, [0, 1])
        kept = select_kept(scores, 0.5, "salient", rng)
        np.testing.assert_array_equal(kept, [0, 1])

    def test_result_ascending(self, rng):
        for strategy in ("non_salient", "random", "salient"):
            kept = select_kept(rng.normal(size=30), 0.6, strategy, rng)
            assert (np.diff(kept) > 0).all()


class TestEncode:
    def test_keep_count_schedule(self, small_config, small_weights, rng):
        # 32 patches, keep rate 0.8: 32 -> 26 -> 21 -> 17
        feat = encode(_image(rng, small_config), 0, small_config, small_weights)
        assert [m.sum() for m in feat.kept_masks] == [26, 21, 17]
        assert feat.patches.shape == (17, small_config.embed_dim)

    def test_default_geometry_schedule(self):
        # 210 patches at keep rate 0.8: 168 -> 135 -> 108 after the pruning blocks
        cfg = EncoderConfig(embed_dim=16, mlp_dim=32, heads=2, layers=12,
                            sparsify_layers=(3, 6, 9), keep_rate=0.8)
        w = init_weights(cfg, seed=0)
        img = np.random.default_rng(0).integers(0, 256, (256, 128, 3), dtype=np.uint8)
        feat = encode(img, 0, cfg, w)
        assert [int(m.sum()) for m in feat.kept_masks] == [168, 135, 108]

    def test_mask_nesting(self, small_config, small_weights, rng):
        feat = encode(_image(rng, small_config), 0, small_config, small_weights)
        for earlier, later in zip(feat.kept_masks, feat.kept_masks[1:]):
            assert (earlier | later).sum() == earlier.sum()  # later is a subset

    def test_kept_indices_match_final_mask(self, small_config, small_weights, rng):
        feat = encode(_image(rng, small_config), 0, small_config, small_weights)
        np.testing.assert_array_equal(np.flatnonzero(feat.kept_masks[-1]),
                                      feat.kept_patch_indices)

    def test_keep_rate_one_equals_dense_path(self, small_config, small_weights, rng):
        img = _image(rng, small_config)
        sparse_cfg = replace(small_config, keep_rate=1.0)
        dense_cfg = replace(small_config, sparsify_layers=(), keep_rate=1.0)
        a = encode(img, 2, sparse_cfg, small_weights)
        b = encode(img, 2, dense_cfg, small_weights)
        np.testing.assert_allclose(a.cls, b.cls, atol=1e-5)
        np.testing.assert_allclose(a.patches, b.patches, atol=1e-5)
        assert a.flops.total == b.flops.total

    def test_flops_ratio_matches_table(self):
        dense = encoder_flops(EncoderConfig(keep_rate=1.0))
        sparse = encoder_flops(EncoderConfig(keep_rate=0.8))
        assert abs(sparse.total / dense.total - 0.75) <= 0.03

    def test_random_strategy_deterministic(self, small_config, small_weights, rng):
        cfg = replace(small_config, drop_strategy="random", drop_seed=11)
        img = _image(rng, cfg)
        a = encode(img, 0, cfg, small_weights)
        b = encode(img, 0, cfg, small_weights)
        np.testing.assert_array_equal(a.cls, b.cls)
        np.testing.assert_array_equal(a.patches, b.patches)
        np.testing.assert_array_equal(a.kept_patch_indices, b.kept_patch_indices)

    def test_flops_report_matches_analytic(self, small_config, small_weights, rng):
        feat = encode(_image(rng, small_config), 0, small_config, small_weights)
        assert feat.flops.total == encoder_flops(small_config).total

    @pytest.mark.parametrize("strategy", ["non_salient", "random", "salient"])
    def test_cls_survives_aggressive_pruning(self, strategy, small_config, small_weights, rng):
        cfg = replace(small_config, keep_rate=0.05, drop_strategy=strategy)
        feat = encode(_image(rng, cfg), 0, cfg, small_weights)
        assert feat.cls.shape == (cfg.embed_dim,)
        assert feat.patches.shape[0] >= 1  # ceil keeps at least one patch per stage
        assert np.isfinite(feat.cls).all()


class TestInitWeights:
    def test_same_seed_identical(self, small_config):
        a = init_weights(small_config, seed=3)
        b = init_weights(small_config, seed=3)
        np.testing.assert_array_equal(a.patch_weight, b.patch_weight)
        np.testing.assert_array_equal(a.layer_weights[2].attn.wq, b.layer_weights[2].attn.wq)

    def test_different_seeds_differ(self, small_config):
        a = init_weights(small_config, seed=3)
        b = init_weights(small_config, seed=4)
        assert not np.array_equal(a.patch_weight, b.patch_weight)

    def test_layer_norm_gains_are_one(self, small_config):
        w = init_weights(small_config, seed=3)
        for lw in w.layer_weights:
            np.testing.assert_array_equal(lw.ln1_gain, 1.0)
            np.testing.assert_array_equal(lw.ln2_gain, 1.0)
        np.testing.assert_array_equal(w.final_gain, 1.0)
