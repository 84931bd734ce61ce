"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, image_side: int) -> np.ndarray:
    """Return ``X`` as a float64 array of shape (n, side, side)."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 2 and X.shape == (image_side, image_side):
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (image_side, image_side):
        raise ValueError(f"expected images of shape (n, {image_side}, {image_side}), got {X.shape}")
    return X


def check_classes(y, n: int, n_classes: int, allow_null: bool = False) -> np.ndarray:
    """Integer labels broadcast to length ``n``; ``n_classes`` is the null label."""
    y = np.asarray(0 if y is None else y)
    if y.ndim == 0:
        y = np.full(n, int(y))
    y = check_array(y, ensure_2d=False, dtype=None).astype(np.int64)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    hi = n_classes if allow_null else n_classes - 1
    if y.size and (y.min() < 0 or y.max() > hi):
        raise ValueError(f"labels must lie in [0, {hi}]")
    return y


def check_timesteps(t, n: int, T: int) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(n, int(t))
    t = t.astype(np.int64)
    if t.shape != (n,):
        raise ValueError(f"expected {n} timesteps, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= T):
        raise ValueError(f"timesteps must lie in [0, {T})")
    return t
