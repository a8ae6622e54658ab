"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

__all__ = ["check_clips", "check_clip_labels", "check_features"]


def check_clips(X, min_frames: int = 2, allow_empty: bool = False) -> np.ndarray:
    """Validate a clip batch ``(n, 3, T, H, W)`` in [0, 1]; returns float32."""
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"clips must be numeric, got dtype {X.dtype}")
    if X.ndim != 5 or X.shape[1] != 3:
        raise ValueError(f"expected clips of shape (n, 3, T, H, W), got {X.shape}")
    if X.shape[0] == 0 and not allow_empty:
        raise ValueError("no clips given")
    if X.shape[2] < min_frames:
        raise ValueError(f"clips need at least {min_frames} frames, got {X.shape[2]}")
    if min(X.shape[3:]) < 1:
        raise ValueError(f"empty frames in clips of shape {X.shape}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("clips contain NaN or infinite values")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError(f"pixel values must lie in [0, 1], got [{X.min():.3g}, {X.max():.3g}]")
    return X


def check_clip_labels(X, y, min_frames: int = 2) -> tuple[np.ndarray, np.ndarray]:
    X = check_clips(X, min_frames)
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(X):
        raise ValueError(f"expected {len(X)} labels, got shape {y.shape}")
    return X, y


def check_features(F, n_features: int | None = None) -> np.ndarray:
    """Validate a 2-D finite feature matrix."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {F.shape}")
    if not np.isfinite(F).all():
        raise ValueError("features contain NaN or infinite values")
    if n_features is not None and F.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {F.shape[1]}")
    return F
