"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError


def check_radius_range(radius_range) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in radius_range)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"radius_range must be a (min, max) pair, got {radius_range!r}") from exc
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise ConfigurationError(f"degenerate radius_range ({lo}, {hi})")
    return lo, hi


def check_poses(X):
    """Return a list of CameraPose from poses or an ``(n, 5)`` array."""
    from .camera import CameraPose

    if isinstance(X, CameraPose):
        return [X]
    if len(X) and all(isinstance(p, CameraPose) for p in X):
        return list(X)
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == 5:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise ValueError(f"expected poses with shape (n, 5), got {arr.shape}")
    return [CameraPose.from_array(row) for row in arr]


def check_images(X, channels: int = 3, size: int | None = None) -> np.ndarray:
    """Coerce images to float32 ``(n, H, W, C)`` in [0, 1].

    ``uint8`` input is rescaled; RGBA input is composited over white.
    """
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected images with shape (n, H, W, C), got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
    if arr.shape[-1] == 4 and channels == 3:
        alpha = arr[..., 3:4]
        arr = arr[..., :3] * alpha + (1.0 - alpha)
    if arr.shape[-1] != channels:
        raise ValueError(f"expected {channels} channels, got {arr.shape[-1]}")
    if size is not None and arr.shape[1:3] != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {arr.shape[1]}x{arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain non-finite values")
    return arr


def check_mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones((n, 6), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (n, mask.shape[0]))
    if mask.shape != (n, 6):
        raise ValueError(f"label mask must have shape ({n}, 6), got {mask.shape}")
    if not mask.any(axis=1).all():
        raise ConfigurationError("every sample needs at least one labeled component")
    return mask
