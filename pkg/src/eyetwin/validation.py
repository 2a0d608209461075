"""Input validation helpers shared across estimators and geometry ops."""

from __future__ import annotations

import numpy as np

__all__ = ["check_points", "check_finite", "check_is_fitted", "NotFittedError"]


class NotFittedError(RuntimeError):
    """Estimator used before ``fit``."""


def check_points(
    points, name: str = "points", allow_empty: bool = False, min_points: int = 0
) -> np.ndarray:
    """Coerce to an (n, 3) float64 array of finite 3D points."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise ValueError(f"{name} must be non-empty")
    if arr.shape[0] < min_points:
        raise ValueError(f"{name} needs at least {min_points} points, got {arr.shape[0]}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_finite(value, name: str = "value"):
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_is_fitted(estimator, attribute: str):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted; call fit() first"
        )
