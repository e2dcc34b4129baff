"""Input checks shared by the estimator wrappers and the CLI."""
from __future__ import annotations

import numpy as np

from .exceptions import ShapeError
from .voxel import DepthImage


def check_volumes(X, dims=None, name: str = "X", dtype=np.float64) -> np.ndarray:
    """Return ``X`` as a finite (n, D, H, W) array; a single (D, H, W)
    volume is promoted to a batch of one."""
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError(f"{name} must be (D, H, W) or (n, D, H, W), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError(f"{name} holds no volumes")
    if dims is not None and tuple(X.shape[1:]) != tuple(dims):
        raise ShapeError(f"{name} volumes are {X.shape[1:]}, expected {tuple(dims)}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return X


def check_label_volumes(y, like: np.ndarray, num_classes: int, name: str = "y") -> np.ndarray:
    """Integer labels shaped like ``like`` with values in [0, num_classes)."""
    y = np.asarray(y)
    if y.ndim == like.ndim - 1:
        y = y[None]
    if y.shape != like.shape:
        raise ShapeError(f"{name} has shape {y.shape}, expected {like.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError(f"{name} must hold integer labels")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        bad = int(np.flatnonzero((y < 0) | (y >= num_classes))[0])
        raise ValueError(f"{name} value {y.reshape(-1)[bad]} at flat index {bad} outside [0, {num_classes})")
    return y


def check_depth_images(X) -> list[DepthImage]:
    """A single DepthImage or a non-empty sequence of them."""
    if isinstance(X, DepthImage):
        return [X]
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"expected DepthImage or a sequence of them, got {type(X).__name__}") from None
    if not items:
        raise ValueError("no depth images given")
    for i, d in enumerate(items):
        if not isinstance(d, DepthImage):
            raise TypeError(f"item {i} is {type(d).__name__}, not DepthImage")
    return items


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
