"""Input checks shared by the estimator and the trainer."""

from __future__ import annotations

import numpy as np

UNLABELED = -1


def check_images(X, levels: int | None = None) -> np.ndarray:
    """Return ``X`` as a float64 (N, 1, H, W) array.

    Accepts (N, H, W) or (N, 1, H, W). With ``levels`` the spatial sides must
    be divisible by ``2 ** (levels - 1)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected images of shape (N, H, W) or (N, 1, H, W), got {X.shape}")
    if len(X) == 0:
        raise ValueError("no images given")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    if levels is not None:
        step = 2 ** (levels - 1)
        if X.shape[2] % step or X.shape[3] % step:
            raise ValueError(f"image size {X.shape[2:]} must be divisible by {step} for {levels} levels")
    return X


def check_label_maps(y, X: np.ndarray, classes: int | None = None) -> np.ndarray:
    """Return ``y`` as an int (N, H, W) map; ``-1`` marks unlabeled pixels."""
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"label maps of shape {y.shape} do not match images {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("label maps must hold integer class indices")
    y = y.astype(np.int64)
    if y.min() < UNLABELED:
        raise ValueError(f"labels must be >= {UNLABELED}")
    if classes is not None and y.max() >= classes:
        raise ValueError(f"label {y.max()} out of range for {classes} classes")
    return y


def split_supervision(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of fully labeled images and of partially labeled ones."""
    partial = np.any(y == UNLABELED, axis=(1, 2))
    return np.flatnonzero(~partial), np.flatnonzero(partial)
