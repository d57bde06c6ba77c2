"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_is_fitted as _sk_check_is_fitted

from .tensor.ops import ShapeError


def check_is_fitted(estimator, attribute):
    _sk_check_is_fitted(estimator, attributes=[attribute])


def check_images(images, channels=3):
    """Coerce to a finite float64 (N, C, H, W) array."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ShapeError(f"expected images shaped (N, {channels}, H, W), got {images.shape}")
    if images.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got {images.shape[1]}")
    if not np.all(np.isfinite(images)):
        raise ValueError("images contain NaN or Inf")
    return images


def tag_matrix(tag_sets, vocabulary):
    """0/1 matrix (N, len(vocabulary)) from tag sets, or pass a matrix through."""
    if isinstance(tag_sets, np.ndarray) and tag_sets.ndim == 2 and tag_sets.dtype != object:
        if tag_sets.shape[1] != len(vocabulary):
            raise ShapeError(f"label matrix has {tag_sets.shape[1]} columns for {len(vocabulary)} tags")
        return tag_sets.astype(np.float64)
    out = np.zeros((len(tag_sets), len(vocabulary)))
    for i, tags in enumerate(tag_sets):
        for t in tags:
            if t not in vocabulary:
                raise ValueError(f"unknown tag {t!r} not in vocabulary")
            out[i, vocabulary.index(t)] = 1.0
    return out


def check_vector(v, dim=None, name="vector"):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ShapeError(f"{name} has dimension {v.shape[0]}, expected {dim}")
    return v
