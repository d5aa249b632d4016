"""Input checks shared by the estimators and the pipeline functions."""

from __future__ import annotations

import numpy as np


def check_gray_image(gray) -> np.ndarray:
    """Return ``gray`` as a float64 2-D array after range checking."""
    arr = np.asarray(gray)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("grayscale image contains non-finite values")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError(
            f"grayscale values must lie in [0, 255], got [{arr.min():g}, {arr.max():g}]"
        )
    return arr


def check_square(arr: np.ndarray, size: int, what: str = "array") -> None:
    if arr.shape != (size, size):
        raise ValueError(f"{what} has shape {arr.shape}, expected ({size}, {size})")


def check_finite(arr: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains NaN or Inf values")


def check_image_batch(X, size: int | None = None, dtype=np.float32) -> np.ndarray:
    """Coerce ``X`` to an ``(n, 1, h, w)`` batch.

    Accepts a single ``(h, w)`` image, an ``(n, h, w)`` stack or an
    ``(n, 1, h, w)`` batch.
    """
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 2:
        X = X[None, None]
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected (n, h, w) or (n, 1, h, w) images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if size is not None and X.shape[2:] != (size, size):
        raise ValueError(
            f"images are {X.shape[2]}x{X.shape[3]} but the model expects {size}x{size}"
        )
    check_finite(X, what="input batch")
    return X


def check_paired(X: np.ndarray, y: np.ndarray) -> None:
    if X.shape != y.shape:
        raise ValueError(f"inputs {X.shape} and targets {y.shape} differ in shape")
