"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .networks import OBS_SHAPE


def check_observations(X, dtype=np.float32) -> tuple[np.ndarray, bool]:
    """Return a [N, 4, 84, 84] array in [0, 1] and whether X was a single observation."""
    X = np.asarray(X, dtype=dtype)
    single = X.ndim == 3
    if single:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != OBS_SHAPE:
        raise ValueError(f"observations must have shape (N, {', '.join(map(str, OBS_SHAPE))}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("observations contain NaN or infinity")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("observations must lie in [0, 1]")
    return X, single


def check_frames(X) -> tuple[np.ndarray, bool]:
    """Return raw RGB frames as [N, H, W, 3] and whether X was a single frame."""
    X = np.asarray(X)
    single = X.ndim == 3
    if single:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"frames must have shape (N, H, W, 3), got {X.shape}")
    if X.dtype.kind not in "uif":
        raise ValueError(f"frames must be numeric, got dtype {X.dtype}")
    return X, single


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
