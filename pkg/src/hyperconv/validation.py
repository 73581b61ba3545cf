"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array, check_X_y


def check_images(X, channels: int | None = None) -> np.ndarray:
    """Finite float64 array shaped ``[N, C, H, W]`` with square images."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4:
        raise ValueError(f"expected images [N, C, H, W], got an array with shape {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    return X


def check_images_labels(X, y) -> tuple[np.ndarray, np.ndarray]:
    X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    return check_images(X), y


def check_probability(p: float, name: str) -> float:
    if not 0 < p < 1:
        raise ValueError(f"{name} must lie strictly between 0 and 1, got {p}")
    return float(p)
