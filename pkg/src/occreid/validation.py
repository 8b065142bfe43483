"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .exceptions import InputError, ShapeError

__all__ = ["check_image_batch", "check_labels", "check_camera_ids"]


def check_image_batch(X, image_h: int, image_w: int, channels: int = 3) -> np.ndarray:
    """Coerce to a (n, H, W, C) uint8 array matching the configured geometry."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != (image_h, image_w, channels):
        raise ShapeError(
            f"expected images of shape (n, {image_h}, {image_w}, {channels}), got {X.shape}"
        )
    if X.dtype != np.uint8:
        if np.issubdtype(X.dtype, np.floating) and X.max(initial=0.0) <= 1.0:
            X = np.clip(np.rint(X * 255.0), 0, 255).astype(np.uint8)
        else:
            X = np.clip(np.rint(X), 0, 255).astype(np.uint8)
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise InputError(f"expected {n_samples} labels, got array of shape {y.shape}")
    return y.astype(np.int64)


def check_camera_ids(camera_ids, n_samples: int, num_cameras: int) -> np.ndarray:
    """Validate per-sample camera ids; None means camera 0 for every sample."""
    if camera_ids is None:
        return np.zeros(n_samples, dtype=np.int64)
    cams = np.asarray(camera_ids)
    if cams.ndim != 1 or cams.shape[0] != n_samples:
        raise InputError(f"expected {n_samples} camera ids, got shape {cams.shape}")
    cams = cams.astype(np.int64)
    if cams.min(initial=0) < 0 or cams.max(initial=0) >= num_cameras:
        raise InputError(f"camera ids must lie in [0, {num_cameras})")
    return cams
