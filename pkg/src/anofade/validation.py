"""Input validation helpers shared across the package.

All checks raise ``ValueError`` with a message that names the offending
argument, so failures surface at the API boundary instead of deep inside
numerical code.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_same_shape",
    "check_unit_range",
    "check_positive",
    "check_odd",
    "check_choice",
    "check_timestep",
    "as_image_batch",
]


def check_same_shape(**arrays) -> None:
    """Require every named array to have an identical shape."""
    items = list(arrays.items())
    first_name, first = items[0]
    for name, arr in items[1:]:
        if tuple(arr.shape) != tuple(first.shape):
            raise ValueError(
                f"shape mismatch: {first_name} has {tuple(first.shape)} but "
                f"{name} has {tuple(arr.shape)}"
            )


def check_unit_range(name: str, values, lo: float = 0.0, hi: float = 1.0) -> None:
    """Require all entries of ``values`` (scalar or array) to lie in [lo, hi]."""
    mn = float(values.min()) if hasattr(values, "min") else float(np.min(values))
    mx = float(values.max()) if hasattr(values, "max") else float(np.max(values))
    if not (lo <= mn and mx <= hi):
        raise ValueError(f"{name} must lie in [{lo}, {hi}], got range [{mn}, {mx}]")


def check_positive(name: str, value) -> None:
    if value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")


def check_odd(name: str, value: int) -> None:
    if value < 1 or value % 2 == 0:
        raise ValueError(f"{name} must be a positive odd integer, got {value}")


def check_choice(name: str, value, options) -> None:
    if value not in options:
        raise ValueError(f"{name} must be one of {tuple(options)}, got {value!r}")


def check_timestep(t: int, steps: int, minimum: int = 0) -> None:
    if not (minimum <= t <= steps):
        raise ValueError(f"timestep must lie in [{minimum}, {steps}], got {t}")


def as_image_batch(X, channels: int = 3) -> np.ndarray:
    """Coerce a list/array of images to a float (N, H, W, C) batch.

    Accepts a single (H, W, C) image, an (N, H, W, C) stack, or a sequence of
    equally sized images. Grayscale (H, W) entries are replicated to
    ``channels`` planes. Values are left untouched.
    """
    if isinstance(X, np.ndarray) and X.ndim == 4:
        batch = X
    else:
        images = [X] if isinstance(X, np.ndarray) else [np.asarray(img) for img in X]
        expanded = []
        for img in images:
            if img.ndim == 2:
                img = np.repeat(img[..., None], channels, axis=-1)
            if img.ndim != 3:
                raise ValueError(f"expected (H, W, C) images, got shape {img.shape}")
            expanded.append(img)
        shapes = {img.shape for img in expanded}
        if len(shapes) != 1:
            raise ValueError(f"images in a batch must share one shape, got {sorted(shapes)}")
        batch = np.stack(expanded)
    if batch.shape[-1] != channels:
        raise ValueError(f"expected {channels} channels, got {batch.shape[-1]}")
    if not np.all(np.isfinite(batch)):
        raise ValueError("image batch contains non-finite values")
    return batch.astype(np.float32, copy=False)
