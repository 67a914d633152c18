"""Input validation helpers for array-shaped data.

These mirror sklearn's check_array conventions for the channel-first image
batches this package works with: everything user-facing funnels through here
so shape and finiteness errors surface with a consistent message.
"""

import numpy as np

from .errors import ValidationError


def check_images(X, *, name="X"):
    """Validate and coerce a batch of images to a float32 (N, C, H, W) array."""
    X = np.asarray(X)
    if X.ndim == 3:
        # single image -> batch of one
        X = X[None]
    if X.ndim != 4:
        raise ValidationError(
            f"{name} must have shape (n_samples, channels, height, width), got ndim={X.ndim}"
        )
    if X.dtype != np.float32:
        X = X.astype(np.float32)
    if not np.isfinite(X).all():
        bad = int(np.argwhere(~np.isfinite(X).reshape(X.shape[0], -1).all(axis=1))[0][0])
        raise ValidationError(f"{name} contains non-finite values (first bad sample: {bad})")
    return X


def check_labels(y, n_samples, class_count=None, *, name="y"):
    """Validate integer class labels in [0, class_count)."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValidationError(f"{name} must be 1-dimensional, got ndim={y.ndim}")
    if len(y) != n_samples:
        raise ValidationError(f"{name} has {len(y)} entries for {n_samples} samples")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == y.astype(np.int64)):
            raise ValidationError(f"{name} must contain integer class ids")
    y = y.astype(np.int64)
    if y.size:
        if y.min() < 0:
            raise ValidationError(f"{name} contains negative class ids")
        if class_count is not None and y.max() >= class_count:
            raise ValidationError(
                f"{name} contains class id {int(y.max())} >= class_count {class_count}"
            )
    return y


def check_image_batch(X, expected_shape, *, name="X"):
    """Validate X against a declared per-image (C, H, W) shape."""
    X = check_images(X, name=name)
    if tuple(X.shape[1:]) != tuple(expected_shape):
        raise ValidationError(
            f"{name} images have shape {tuple(X.shape[1:])}, expected {tuple(expected_shape)}"
        )
    return X
