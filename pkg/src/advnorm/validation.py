"""Input-validation helpers shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .exceptions import ShapeError, ValidationError


def check_patches(X, name="X"):
    """Coerce patch intensities to a float32 array of shape ``(n, P, P, P)``.

    A singleton channel axis ``(n, 1, P, P, P)`` is squeezed. Patches must be
    cubic and finite.
    """
    arr = np.asarray(getattr(X, "images", X), dtype=np.float32)
    if arr.ndim == 5 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 4:
        raise ShapeError(f"{name} must have shape (n, P, P, P), got {arr.shape}")
    if len(arr) == 0:
        raise ValidationError(f"{name} contains no patches")
    if not (arr.shape[1] == arr.shape[2] == arr.shape[3]):
        raise ShapeError(f"{name} patches must be cubic, got {arr.shape[1:]}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite intensities")
    return arr


def check_labels(y, X, n_classes, name="y"):
    """Integer label patches matching ``X`` with values in ``[0, n_classes)``."""
    arr = np.asarray(getattr(y, "masks", y))
    if arr.shape != X.shape:
        raise ShapeError(f"{name} shape {arr.shape} does not match patches {X.shape}")
    if arr.dtype.kind == "f":
        if not np.all(arr == np.round(arr)):
            raise ValidationError(f"{name} must hold integer class labels")
    elif arr.dtype.kind not in "iub":
        raise ValidationError(f"{name} must hold integer class labels")
    if arr.min() < 0 or arr.max() >= n_classes:
        raise ValidationError(f"{name} labels must lie in [0, {n_classes})")
    return arr.astype(np.uint8)


def check_domains(domains, n, name="domains"):
    """1-based domain labels, one per patch."""
    arr = np.asarray(domains)
    if arr.shape != (n,):
        raise ShapeError(f"{name} must have shape ({n},), got {arr.shape}")
    if arr.dtype.kind not in "iu" and not np.all(arr == np.round(arr)):
        raise ValidationError(f"{name} must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < 1:
        raise ValidationError(f"{name} are 1-based; got {arr.min()}")
    return arr


def check_fractions(text):
    """Parse ``"0.6,0.2,0.2"`` (or a sequence) into three fractions summing to 1."""
    if isinstance(text, str):
        try:
            parts = tuple(float(v) for v in text.split(","))
        except ValueError:
            raise ValidationError(f"cannot parse split fractions {text!r}") from None
    else:
        parts = tuple(float(v) for v in text)
    if len(parts) != 3 or min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
        raise ValidationError(f"split must be three non-negative fractions summing to 1, got {parts}")
    return parts
