"""scikit-learn style estimators wrapping the retrieval pipeline.

``OccludedImageRetriever`` is fit on a labeled gallery and answers queries
like a nearest-neighbor classifier; ``PrunedTokenEncoder`` is a transformer
producing class-vector features. Both follow the sklearn parameter contract
(constructor stores parameters verbatim, ``get_params`` / ``set_params`` /
``clone`` work as usual).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .consolidation import init_decoder_weights
from .encoder import EncoderConfig, encode, init_weights
from .evaluation import full_ranking
from .gallery import build_gallery
from .matching import rank
from .validation import check_camera_ids, check_image_batch, check_labels

__all__ = ["OccludedImageRetriever", "PrunedTokenEncoder"]


class PrunedTokenEncoder(BaseEstimator, TransformerMixin):
    """Transforms images into class-vector features via the sparse encoder.

    ``fit`` draws seed-deterministic weights; no training happens. When no
    camera ids are supplied all images are treated as camera 0.
    """

    def __init__(
        self,
        image_h=256,
        image_w=128,
        patch_size=16,
        patch_stride=12,
        embed_dim=768,
        mlp_dim=3072,
        layers=12,
        heads=12,
        sparsify_layers=(3, 6, 9),
        keep_rate=0.8,
        drop_strategy="non_salient",
        num_cameras=8,
        camera_scale=1.0,
        seed=0,
    ):
        self.image_h = image_h
        self.image_w = image_w
        self.patch_size = patch_size
        self.patch_stride = patch_stride
        self.embed_dim = embed_dim
        self.mlp_dim = mlp_dim
        self.layers = layers
        self.heads = heads
        self.sparsify_layers = sparsify_layers
        self.keep_rate = keep_rate
        self.drop_strategy = drop_strategy
        self.num_cameras = num_cameras
        self.camera_scale = camera_scale
        self.seed = seed

    def _make_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_h=self.image_h,
            image_w=self.image_w,
            patch_size=self.patch_size,
            patch_stride=self.patch_stride,
            embed_dim=self.embed_dim,
            mlp_dim=self.mlp_dim,
            layers=self.layers,
            heads=self.heads,
            sparsify_layers=tuple(self.sparsify_layers),
            keep_rate=self.keep_rate,
            drop_strategy=self.drop_strategy,
            num_cameras=self.num_cameras,
            camera_scale=self.camera_scale,
        )

    def fit(self, X=None, y=None):
        self.config_ = self._make_config()
        self.weights_ = init_weights(self.config_, self.seed)
        return self

    def transform(self, X, camera_ids=None) -> np.ndarray:
        if not hasattr(self, "weights_"):
            raise NotFittedError("PrunedTokenEncoder is not fitted; call fit first")
        cfg = self.config_
        X = check_image_batch(X, cfg.image_h, cfg.image_w, cfg.channels)
        cams = check_camera_ids(camera_ids, X.shape[0], cfg.num_cameras)
        feats = [encode(img, int(cam), cfg, self.weights_).cls for img, cam in zip(X, cams)]
        return np.stack(feats)


class OccludedImageRetriever(BaseEstimator):
    """Gallery-backed retrieval with pruned queries and hybrid distances.

    ``fit`` encodes the gallery densely (holistic features); queries are
    encoded with token pruning and ranked by a cosine shortlist followed by
    the combined cosine/EMD distance. With ``consolidate=True`` the top
    neighbors are folded back into the query feature through the decoder and
    the head of the ranking is re-scored.
    """

    def __init__(
        self,
        image_h=256,
        image_w=128,
        patch_size=16,
        patch_stride=12,
        embed_dim=768,
        mlp_dim=3072,
        layers=12,
        heads=12,
        sparsify_layers=(3, 6, 9),
        keep_rate=0.8,
        drop_strategy="non_salient",
        num_cameras=8,
        camera_scale=1.0,
        alpha=0.4,
        n_neighbors=10,
        shortlist=100,
        consolidate=False,
        seed=0,
    ):
        self.image_h = image_h
        self.image_w = image_w
        self.patch_size = patch_size
        self.patch_stride = patch_stride
        self.embed_dim = embed_dim
        self.mlp_dim = mlp_dim
        self.layers = layers
        self.heads = heads
        self.sparsify_layers = sparsify_layers
        self.keep_rate = keep_rate
        self.drop_strategy = drop_strategy
        self.num_cameras = num_cameras
        self.camera_scale = camera_scale
        self.alpha = alpha
        self.n_neighbors = n_neighbors
        self.shortlist = shortlist
        self.consolidate = consolidate
        self.seed = seed

    def _make_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_h=self.image_h,
            image_w=self.image_w,
            patch_size=self.patch_size,
            patch_stride=self.patch_stride,
            embed_dim=self.embed_dim,
            mlp_dim=self.mlp_dim,
            layers=self.layers,
            heads=self.heads,
            sparsify_layers=tuple(self.sparsify_layers),
            keep_rate=self.keep_rate,
            drop_strategy=self.drop_strategy,
            num_cameras=self.num_cameras,
            camera_scale=self.camera_scale,
        )

    def fit(self, X, y, camera_ids=None):
        """Build the gallery memory from labeled images."""
        cfg = self._make_config()
        X = check_image_batch(X, cfg.image_h, cfg.image_w, cfg.channels)
        y = check_labels(y, X.shape[0])
        cams = check_camera_ids(camera_ids, X.shape[0], cfg.num_cameras)
        self.config_ = cfg
        self.weights_ = init_weights(cfg, self.seed)
        self.decoder_weights_ = init_decoder_weights(
            cfg.embed_dim, cfg.mlp_dim, cfg.heads, self.seed + 1
        )
        self.gallery_ = build_gallery(zip(X, y, cams), cfg, self.weights_)
        self.classes_ = np.unique(y)
        return self

    def _check_fitted(self):
        if not hasattr(self, "gallery_"):
            raise NotFittedError("OccludedImageRetriever is not fitted; call fit first")

    def _encode_queries(self, X, camera_ids):
        cfg = self.config_
        X = check_image_batch(X, cfg.image_h, cfg.image_w, cfg.channels)
        cams = check_camera_ids(camera_ids, X.shape[0], cfg.num_cameras)
        return [encode(img, int(cam), cfg, self.weights_) for img, cam in zip(X, cams)]

    def kneighbors(self, X, camera_ids=None, n_neighbors=None):
        """Combined distances and gallery positions of the nearest records."""
        self._check_fitted()
        k = self.n_neighbors if n_neighbors is None else int(n_neighbors)
        distances, indices = [], []
        for feat in self._encode_queries(X, camera_ids):
            ranked = rank(feat, self.gallery_, alpha=self.alpha, shortlist=self.shortlist, k=k)
            distances.append([c.d_combined for c in ranked.candidates])
            indices.append([c.position for c in ranked.candidates])
        return np.asarray(distances), np.asarray(indices)

    def predict(self, X, camera_ids=None) -> np.ndarray:
        """Person id of the top-ranked gallery record for each query."""
        self._check_fitted()
        out = []
        for feat in self._encode_queries(X, camera_ids):
            order = full_ranking(
                feat,
                self.gallery_,
                alpha=self.alpha,
                shortlist=self.shortlist,
                k=self.n_neighbors,
                consolidate=self.consolidate,
                decoder_weights=self.decoder_weights_,
            )
            out.append(self.gallery_.records[order[0]].person_id)
        return np.asarray(out, dtype=np.int64)

    def score(self, X, y, camera_ids=None) -> float:
        """Top-1 retrieval accuracy against true person ids."""
        predicted = self.predict(X, camera_ids)
        y = check_labels(y, predicted.shape[0])
        return float(np.mean(predicted == y))
