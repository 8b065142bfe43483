import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from occreid.estimators import OccludedImageRetriever, PrunedTokenEncoder
from occreid.evaluation import SyntheticSpec, generate_synthetic
from occreid.exceptions import ShapeError

SMALL = dict(
    image_h=64, image_w=32, patch_size=8, patch_stride=8, embed_dim=64, mlp_dim=128,
    layers=4, heads=4, sparsify_layers=(1, 2, 3), num_cameras=8, camera_scale=0.125,
    seed=5,
)


@pytest.fixture(scope="module")
def corpus():
    spec = SyntheticSpec(identities=4, images_per_identity=2, grid_h=8, grid_w=4,
                         cell_px=8, occlusion_rate=0.3, noise_level=0.03, seed=0)
    queries, gallery = generate_synthetic(spec)
    gx = np.stack([g.pixels for g in gallery])
    gy = np.array([g.person_id for g in gallery])
    gc = np.array([g.camera_id for g in gallery])
    qx = np.stack([q.pixels for q in queries])
    qy = np.array([q.person_id for q in queries])
    qc = np.array([q.camera_id for q in queries])
    return gx, gy, gc, qx, qy, qc


class TestSklearnContract:
    def test_get_params_round_trip(self):
        est = OccludedImageRetriever(**SMALL, alpha=0.3, n_neighbors=4)
        params = est.get_params()
        assert params["alpha"] == 0.3
        assert params["n_neighbors"] == 4
        rebuilt = OccludedImageRetriever(**params)
        assert rebuilt.get_params() == params

    def test_clone(self, corpus):
        gx, gy, gc, *_ = corpus
        est = OccludedImageRetriever(**SMALL, n_neighbors=3).fit(gx, gy, camera_ids=gc)
        fresh = clone(est)
        assert not hasattr(fresh, "gallery_")
        assert fresh.get_params() == est.get_params()

    def test_set_params(self):
        est = OccludedImageRetriever(**SMALL)
        est.set_params(alpha=0.9, keep_rate=0.5)
        assert est.alpha == 0.9 and est.keep_rate == 0.5

    def test_not_fitted_errors(self, corpus):
        *_, qx, qy, qc = corpus[2:]
        with pytest.raises(NotFittedError):
            OccludedImageRetriever(**SMALL).predict(corpus[3][:1])
        with pytest.raises(NotFittedError):
            PrunedTokenEncoder(**SMALL).transform(corpus[3][:1])


class TestRetriever:
    def test_fit_predict_clean_queries(self, corpus):
        gx, gy, gc, *_ = corpus
        est = OccludedImageRetriever(**SMALL, keep_rate=1.0, alpha=0.0, n_neighbors=3)
        est.fit(gx, gy, camera_ids=gc)
        # the gallery images themselves, queried from an unseen camera
        pred = est.predict(gx, camera_ids=np.full(len(gx), 7))
        assert (pred == gy).mean() == 1.0

    def test_score_matches_predict(self, corpus):
        gx, gy, gc, qx, qy, qc = corpus
        est = OccludedImageRetriever(**SMALL, n_neighbors=3).fit(gx, gy, camera_ids=gc)
        acc = est.score(qx, qy, camera_ids=qc)
        assert acc == pytest.approx((est.predict(qx, camera_ids=qc) == qy).mean())

    def test_kneighbors_shapes_and_order(self, corpus):
        gx, gy, gc, qx, *_ = corpus
        est = OccludedImageRetriever(**SMALL, n_neighbors=3).fit(gx, gy, camera_ids=gc)
        dist, idx = est.kneighbors(qx[:2], camera_ids=[7, 7])
        assert dist.shape == (2, 3) and idx.shape == (2, 3)
        assert (np.diff(dist, axis=1) >= 0).all()
        assert idx.min() >= 0 and idx.max() < len(gx)

    def test_consolidation_path_runs(self, corpus):
        gx, gy, gc, qx, qy, qc = corpus
        est = OccludedImageRetriever(**SMALL, n_neighbors=2, consolidate=True)
        est.fit(gx, gy, camera_ids=gc)
        pred = est.predict(qx[:3], camera_ids=qc[:3])
        assert pred.shape == (3,)
        assert set(pred).issubset(set(gy))

    def test_wrong_image_shape_rejected(self, corpus):
        gx, gy, gc, *_ = corpus
        est = OccludedImageRetriever(**SMALL)
        with pytest.raises(ShapeError):
            est.fit(np.zeros((2, 10, 10, 3), dtype=np.uint8), [0, 1])

    def test_classes_attribute(self, corpus):
        gx, gy, gc, *_ = corpus
        est = OccludedImageRetriever(**SMALL).fit(gx, gy, camera_ids=gc)
        np.testing.assert_array_equal(est.classes_, np.unique(gy))


class TestEncoderTransformer:
    def test_transform_shape(self, corpus):
        gx, *_ = corpus
        enc = PrunedTokenEncoder(**SMALL).fit()
        feats = enc.transform(gx[:3])
        assert feats.shape == (3, 64)

    def test_transform_deterministic(self, corpus):
        gx, *_ = corpus
        enc = PrunedTokenEncoder(**SMALL).fit()
        np.testing.assert_array_equal(enc.transform(gx[:2]), enc.transform(gx[:2]))

    def test_fit_transform_mixin(self, corpus):
        gx, *_ = corpus
        feats = PrunedTokenEncoder(**SMALL).fit_transform(gx[:2])
        assert feats.shape == (2, 64)
