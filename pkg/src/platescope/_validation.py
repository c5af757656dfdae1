"""Input-validation helpers shared by the estimator facade."""

from __future__ import annotations

import numpy as np

from .data import DatasetManifest
from .errors import ShapeError


def check_images(X, channels: int | None = None) -> np.ndarray:
    """Coerce to float64 [N, C, H, W] and verify finiteness."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ShapeError(f"images must be 4-d [N, C, H, W], got {list(X.shape)}")
    if channels is not None and X.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ShapeError("images contain non-finite values")
    return X


def check_labels(y, n: int, num_classes: int) -> np.ndarray:
    """Coerce to int64 [n]; -1 marks unlabeled, otherwise in [0, num_classes)."""
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ShapeError(f"labels must be 1-d of length {n}, got {list(y.shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.floor(y)):
            raise ShapeError("labels must be integers (-1 for unlabeled)")
    y = y.astype(np.int64)
    if np.any(y < -1) or np.any(y >= num_classes):
        raise ShapeError(f"labels must be -1 or in [0, {num_classes})")
    return y


def check_manifest_alignment(manifest: DatasetManifest, X: np.ndarray) -> None:
    if X.shape[0] != manifest.num_images:
        raise ShapeError(f"{X.shape[0]} images but manifest records {manifest.num_images}")
    if X.shape[1] != manifest.channels or X.shape[2] != manifest.height or X.shape[3] != manifest.width:
        raise ShapeError(
            f"image geometry {list(X.shape[1:])} does not match manifest "
            f"[{manifest.channels}, {manifest.height}, {manifest.width}]"
        )
