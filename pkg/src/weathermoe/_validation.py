"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_images(X, shape=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, C, H, W), got {X.shape}")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise ValueError(f"image shape {tuple(X.shape[1:])} does not match the configured shape {tuple(shape)}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X


def check_labels(y, n_classes: int, n: int) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if len(y) != n:
        raise ValueError(f"got {len(y)} labels for {n} samples")
    y = y.astype(np.int64)
    if len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def check_k(k: int, n: int = 7) -> int:
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= n:
        raise ValueError(f"K must be an integer in [1, {n}], got {k!r}")
    return int(k)


def check_same_grid(*maps) -> None:
    shapes = {tuple(np.shape(m)[-2:]) for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"feature grids differ in spatial size: {sorted(shapes)}")
