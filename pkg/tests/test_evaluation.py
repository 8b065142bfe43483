from dataclasses import replace

import numpy as np
import pytest

from occreid.encoder import encode
from occreid.evaluation import (
    LabeledImage,
    SyntheticSpec,
    average_precision,
    cmc_curve,
    evaluate,
    first_match_rank,
    generate_synthetic,
    sweep,
)
from occreid.exceptions import ConfigurationError, InputError
from occreid.gallery import build_gallery
from occreid.matching import stage1_distances


@pytest.fixture(scope="module")
def tiny_fixture(small_config, small_weights):
    spec = SyntheticSpec(
        identities=6,
        images_per_identity=2,
        grid_h=small_config.grid_h,
        grid_w=small_config.grid_w,
        cell_px=small_config.patch_size,
        occlusion_rate=0.3,
        noise_level=0.03,
        seed=3,
    )
    queries, gallery = generate_synthetic(spec)
    memory = build_gallery(
        [(g.pixels, g.person_id, g.camera_id) for g in gallery], small_config, small_weights
    )
    return queries, memory


class TestAveragePrecision:
    def test_hand_case(self):
        # relevant at ranks 1 and 3 of 4: AP = (1/1 + 2/3) / 2
        pids = np.array([1, 2, 1, 3])
        cams = np.array([0, 0, 1, 0])
        ap = average_precision(pids, cams, query_pid=1, query_camid=9)
        assert ap == pytest.approx((1.0 + 2.0 / 3.0) / 2.0, abs=1e-12)

    def test_perfect_ranking(self):
        pids = np.array([1, 1, 2, 3])
        cams = np.zeros(4, dtype=int)
        assert average_precision(pids, cams, 1, 9) == pytest.approx(1.0)

    def test_single_relevant_at_rank_r(self):
        for r in range(1, 6):
            pids = np.array([0] * (r - 1) + [1] + [0] * (6 - r))
            cams = np.zeros(6, dtype=int)
            assert average_precision(pids, cams, 1, 9) == pytest.approx(1.0 / r)

    def test_same_pid_same_cam_excluded(self):
        # the rank-1 entry is the query itself (same pid and camera): skip it
        pids = np.array([1, 2, 1])
        cams = np.array([5, 0, 1])
        ap = average_precision(pids, cams, query_pid=1, query_camid=5)
        assert ap == pytest.approx(1.0 / 2.0)

    def test_no_relevant_returns_none(self):
        pids = np.array([2, 3])
        cams = np.zeros(2, dtype=int)
        assert average_precision(pids, cams, 1, 0) is None


class TestCmcCurve:
    def test_all_rank_one(self):
        curve = cmc_curve([1, 1, 1], max_rank=5)
        np.testing.assert_allclose(curve, 1.0)

    def test_all_rank_two(self):
        curve = cmc_curve([2, 2], max_rank=4)
        np.testing.assert_allclose(curve, [0.0, 1.0, 1.0, 1.0])

    def test_mixed_two_queries(self):
        curve = cmc_curve([1, 3], max_rank=3)
        np.testing.assert_allclose(curve, [0.5, 0.5, 1.0])

    def test_monotone_and_bounded(self, rng):
        ranks = [int(r) for r in rng.integers(1, 10, size=30)]
        curve = cmc_curve(ranks, max_rank=10)
        assert (np.diff(curve) >= 0).all()
        assert curve.min() >= 0.0 and curve.max() <= 1.0

    def test_first_match_rank_junk_filtering(self):
        pids = np.array([1, 1])
        cams = np.array([5, 1])
        assert first_match_rank(pids, cams, 1, 5) == 1  # first entry filtered out


class TestGenerateSynthetic:
    def test_no_corruption_matches_gallery(self):
        spec = SyntheticSpec(identities=3, images_per_identity=2, occlusion_rate=0.0,
                             noise_level=0.0, seed=1)
        queries, gallery = generate_synthetic(spec)
        by_pid = {}
        for g in gallery:
            by_pid.setdefault(g.person_id, g.pixels)
        for q in queries:
            np.testing.assert_array_equal(q.pixels, by_pid[q.person_id])

    def test_seed_determinism(self):
        spec = SyntheticSpec(identities=4, images_per_identity=2, seed=9)
        q1, g1 = generate_synthetic(spec)
        q2, g2 = generate_synthetic(spec)
        for a, b in zip(q1 + g1, q2 + g2):
            np.testing.assert_array_equal(a.pixels, b.pixels)
            assert (a.person_id, a.camera_id) == (b.person_id, b.camera_id)

    def test_occluded_cell_count_exact(self):
        spec = SyntheticSpec(identities=2, images_per_identity=1, grid_h=21, grid_w=10,
                             cell_px=4, occlusion_rate=0.5, noise_level=0.0, seed=0)
        queries, gallery = generate_synthetic(spec)
        base = {g.person_id: g.pixels for g in gallery}
        for q in queries:
            diff = (q.pixels != base[q.person_id]).any(axis=2)
            cells = diff.reshape(21, spec.cell_px, 10, spec.cell_px).any(axis=(1, 3))
            assert cells.sum() == 105  # round(0.5 * 210)

    def test_query_cameras_disjoint_from_gallery(self):
        spec = SyntheticSpec(identities=3, images_per_identity=3, seed=2, num_cameras=4)
        queries, gallery = generate_synthetic(spec)
        q_cams = {q.camera_id for q in queries}
        g_cams = {g.camera_id for g in gallery}
        assert q_cams.isdisjoint(g_cams)

    def test_rate_bounds_validated(self):
        with pytest.raises(ConfigurationError):
            SyntheticSpec(occlusion_rate=1.5)


class TestEvaluate:
    def test_exact_duplicate_retrieval(self, small_config, small_weights):
        # query set is the gallery set itself; the self-match is excluded by
        # the same-id-same-camera rule, and the identical-pixel copy under a
        # different camera must come first
        spec = SyntheticSpec(identities=5, images_per_identity=2, grid_h=8, grid_w=4,
                             cell_px=8, occlusion_rate=0.0, noise_level=0.0, seed=4)
        _, gallery = generate_synthetic(spec)
        memory = build_gallery(
            [(g.pixels, g.person_id, g.camera_id) for g in gallery],
            small_config, small_weights,
        )
        queries = [
            LabeledImage(pixels=g.pixels, person_id=g.person_id, camera_id=g.camera_id)
            for g in gallery
        ]
        cfg = replace(small_config, keep_rate=1.0)
        report = evaluate(queries, memory, cfg, small_weights, alpha=0.0, k=1)
        assert report.rank_n(1) == pytest.approx(1.0)

    def test_alpha_zero_dense_reduces_to_cosine_scan(self, tiny_fixture, small_config,
                                                     small_weights):
        queries, memory = tiny_fixture
        cfg = replace(small_config, keep_rate=1.0)
        report = evaluate(queries[:4], memory, cfg, small_weights, alpha=0.0, k=3)
        pids = memory.person_ids()
        cams = memory.camera_ids()
        expected = []
        for q in queries[:4]:
            feat = encode(q.pixels, q.camera_id, cfg, small_weights)
            order = np.argsort(stage1_distances(feat, memory), kind="stable")
            expected.append(
                average_precision(pids[order], cams[order], q.person_id, q.camera_id)
            )
        np.testing.assert_allclose(report.per_query_ap, expected, atol=1e-12)

    def test_k_one_consolidation_runs(self, tiny_fixture, small_config, small_weights):
        from occreid.consolidation import init_decoder_weights

        queries, memory = tiny_fixture
        decoder = init_decoder_weights(small_config.embed_dim, small_config.mlp_dim,
                                       small_config.heads, seed=1)
        report = evaluate(queries[:3], memory, small_config, small_weights, k=1,
                          consolidate=True, decoder_weights=decoder)
        assert 0.0 <= report.map <= 1.0

    def test_map_is_mean_ap(self, tiny_fixture, small_config, small_weights):
        queries, memory = tiny_fixture
        report = evaluate(queries[:5], memory, small_config, small_weights, k=2)
        assert report.map == pytest.approx(np.mean(report.per_query_ap))
        assert report.rank_n(1) == pytest.approx(report.cmc[0])

    def test_empty_inputs_rejected(self, tiny_fixture, small_config, small_weights):
        queries, memory = tiny_fixture
        with pytest.raises(InputError):
            evaluate([], memory, small_config, small_weights)


class TestSweep:
    def test_singleton_equals_direct_call(self, tiny_fixture, small_config, small_weights):
        queries, memory = tiny_fixture
        rows = sweep("alpha", [0.4], queries[:4], memory, small_config, small_weights, k=2)
        direct = evaluate(queries[:4], memory, small_config, small_weights, alpha=0.4, k=2)
        assert len(rows) == 1
        assert rows[0][1].map == pytest.approx(direct.map)
        np.testing.assert_allclose(rows[0][1].cmc, direct.cmc)

    def test_unknown_param_rejected(self, tiny_fixture, small_config, small_weights):
        queries, memory = tiny_fixture
        with pytest.raises(ConfigurationError):
            sweep("margin", [0.1], queries, memory, small_config, small_weights)

    def test_keep_rate_flops_column(self, tiny_fixture, small_config, small_weights):
        queries, memory = tiny_fixture
        rows = sweep("keep_rate", [1.0, 0.5], queries[:2], memory, small_config,
                     small_weights, k=1)
        assert rows[0][1].flops.total > rows[1][1].flops.total
