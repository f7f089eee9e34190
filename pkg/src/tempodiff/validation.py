"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, channels: Optional[int] = None, name: str = "X") -> np.ndarray:
    """Validate a (N, C, H, W) batch of images in [0, 1]; (N, H, W) gets a channel axis."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (N, C, H, W), got {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"{name} must have {channels} channels, got {X.shape[1]}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return X


def check_renderings(R, name: str = "renderings") -> np.ndarray:
    R = check_images(R, channels=1, name=name)[:, 0]
    if len(R) < 5:
        raise ValueError(f"{name} needs at least 5 frames for temporal stacks, got {len(R)}")
    return R


def check_masks(M, like: np.ndarray, name: str = "masks") -> np.ndarray:
    M = np.asarray(M)
    if M.shape != (like.shape[0],) + like.shape[-2:]:
        raise ValueError(f"{name} shape {M.shape} does not match images {like.shape}")
    if not np.isin(M, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return M.astype(np.uint8)


def check_pupils(pupils, n: int):
    if pupils is None:
        return None
    pupils = list(pupils)
    if len(pupils) != n:
        raise ValueError(f"expected {n} pupil entries, got {len(pupils)}")
    return pupils


def check_tokens(y, n: int, n_tokens: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        y = np.full(n, int(y))
    if y.shape != (n,):
        raise ValueError(f"expected {n} tokens, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("tokens must be integers")
    if y.min() < 1 or y.max() >= n_tokens:
        raise ValueError(f"style tokens must lie in [1, {n_tokens - 1}]")
    return y.astype(np.int64)
