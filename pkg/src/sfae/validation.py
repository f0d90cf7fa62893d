"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

from .data import SliceBatch
from .exceptions import ContractError, DataContractError


def check_images(X, *, size: int | None = None) -> np.ndarray:
    """Return images as a float32 N x 1 x H x W array in [0, 1].

    Accepts a SliceBatch, an (N, H, W) or (N, 1, H, W) array-like.
    """
    if isinstance(X, SliceBatch):
        arr = X.images
    else:
        arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ContractError(f"expected (N, H, W) or (N, 1, H, W) images, got shape {arr.shape}")
    if len(arr) == 0:
        raise ContractError("need at least one image")
    if not np.isfinite(arr).all():
        raise ContractError("images contain non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError("images must lie in [0, 1]")
    if size is not None and arr.shape[2:] != (size, size):
        raise ContractError(f"expected {size}x{size} images, got {arr.shape[2:]}")
    return np.ascontiguousarray(arr, dtype=np.float32)


def check_normal_labels(X, y=None) -> None:
    """Raise if any training slice is labeled anomalous."""
    labels = y if y is not None else getattr(X, "labels", None)
    if labels is None:
        return
    labels = np.asarray(labels)
    if labels.size and labels.any():
        raise DataContractError(f"{int(np.count_nonzero(labels))} anomalous slices in the training data")


def check_labeled(batch) -> SliceBatch:
    if not isinstance(batch, SliceBatch) or not batch.is_labeled:
        raise ContractError("evaluation needs a SliceBatch with masks and labels")
    return batch
