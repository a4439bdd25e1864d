"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

from .exceptions import NumericError


def check_clips(X, clip_shape: tuple[int, ...] | None = None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a C-contiguous float32 array of clips (n, L, 3, H, W).

    A single clip (L, 3, H, W) is promoted to a batch of one.
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (n_clips, L, 3, H, W), got {arr.shape}")
    if len(arr) == 0:
        raise ValueError(f"{name} holds no clips")
    if clip_shape is not None and arr.shape[1:] != tuple(clip_shape):
        raise ValueError(f"{name} clips have shape {arr.shape[1:]}, expected {tuple(clip_shape)}")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains NaN or Inf")
    return np.ascontiguousarray(arr)


def check_videos(videos, clip_shape: tuple[int, ...] | None = None) -> list[np.ndarray]:
    """Normalise a collection of videos to a list of (N_i, L, 3, H, W) arrays."""
    if isinstance(videos, np.ndarray) and videos.ndim == 6:
        videos = list(videos)
    if isinstance(videos, np.ndarray) and videos.ndim == 5:
        raise ValueError("a single clip stack is ambiguous; wrap it in a list of videos")
    out = [check_clips(v, clip_shape, name=f"video[{i}]") for i, v in enumerate(videos)]
    if not out:
        raise ValueError("no videos given")
    return out


def check_labels(y, n: int, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"y must be 1-D with {n} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
    if y.min() < 0 or (num_classes is not None and y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)
