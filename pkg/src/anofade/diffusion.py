"""Transparency-blending algebra for the anomaly-removal diffusion process.

An anomalous image is modelled as a per-pixel composition of a normal
appearance ``n``, an anomaly appearance ``a`` and a binary anomaly mask ``m``,
blended by an opacity factor ``b`` (the anomaly's transparency level):

    x(b) = (1 - m) * n  +  b * (m * a)  +  (1 - b) * (m * n)

The forward process walks a monotone opacity schedule b_0 = 0 < ... < b_T = 1,
making the anomaly progressively more prominent; ``x(0)`` is the clean image
and ``x(1)`` shows the anomaly fully opaque. Because the mask, normal and
anomaly layers are constant along the ramp, subtracting two consecutive
compositions gives the closed-form reverse transition

    x_{t-1} = x_t - (b_t - b_{t-1}) * (m * a) + (b_t - b_{t-1}) * (m * n),

which removes one schedule increment of anomaly opacity per step. Iterating it
from t = T with the true ``(m, a, n)`` telescopes exactly back to the clean
image; at inference the three inputs come from a learned predictor instead.

All operations are pure and accept either numpy arrays or torch tensors.
Convention: 3-d arrays are height x width x channel, 4-d arrays are
batch x channel x height x width; 2-d/3-d masks are broadcast to the matching
layout. Image and mask must come from the same array library.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .validation import check_choice, check_positive, check_timestep

__all__ = [
    "SCHEDULE_SHAPES",
    "TransparencySchedule",
    "make_schedule",
    "compose",
    "forward_sample",
    "reverse_step",
]

SCHEDULE_SHAPES = ("linear", "quadratic", "root")

#: Output range every image tensor is kept in.
VALUE_RANGE = (-1.0, 1.0)


@dataclass(frozen=True)
class TransparencySchedule:
    """Monotone anomaly-opacity ramp with T + 1 knots b_0 = 0, ..., b_T = 1."""

    shape: str
    steps: int
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        if betas.shape != (self.steps + 1,):
            raise ValueError(
                f"schedule with {self.steps} steps needs {self.steps + 1} values, "
                f"got {betas.shape}"
            )
        if betas[0] != 0.0 or betas[-1] != 1.0 or np.any(np.diff(betas) <= 0):
            raise ValueError("schedule values must rise strictly from 0 to 1")

    def __len__(self) -> int:
        return self.steps


def make_schedule(shape: str = "linear", steps: int = 20) -> TransparencySchedule:
    """Build an opacity schedule of the given shape over ``steps`` transitions.

    ``linear`` uses b_t = t/T, ``quadratic`` (t/T)^2 and ``root`` sqrt(t/T).
    """
    check_choice("shape", shape, SCHEDULE_SHAPES)
    check_positive("steps", steps)
    ramp = np.arange(steps + 1, dtype=np.float64) / steps
    if shape == "quadratic":
        ramp = ramp**2
    elif shape == "root":
        ramp = np.sqrt(ramp)
    return TransparencySchedule(shape=shape, steps=int(steps), betas=ramp)


def _align_mask(mask, image):
    """Insert the axis that lets ``mask`` broadcast against ``image``."""
    if mask.ndim == image.ndim:
        return mask
    if image.ndim == 3 and mask.ndim == 2:  # HWC image, HW mask
        return mask[..., None]
    if image.ndim == 4 and mask.ndim == 3:  # BCHW image, BHW mask
        return mask[:, None]
    raise ValueError(
        f"mask with {mask.ndim} dims cannot broadcast against image with "
        f"{image.ndim} dims"
    )


def _check_spatial(image, mask) -> None:
    if image.ndim == 3:  # HWC
        spatial = tuple(image.shape[:2])
    elif image.ndim == 4:  # BCHW
        spatial = tuple(image.shape[-2:])
    else:
        raise ValueError(f"images must be 3-d or 4-d, got {image.ndim}-d")
    if tuple(mask.shape[-2:]) != spatial:
        raise ValueError(
            f"mask spatial dims {tuple(mask.shape[-2:])} do not match image "
            f"spatial dims {spatial}"
        )


def _align_factor(value, image):
    """Turn a scalar or per-sample opacity into something broadcastable."""
    if np.ndim(value) == 0:
        value = float(value)
        if not (0.0 <= value <= 1.0):
            raise ValueError(f"opacity must lie in [0, 1], got {value}")
        return value
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("per-sample opacities must lie in [0, 1]")
    if image.ndim != 4 or arr.shape[0] != image.shape[0]:
        raise ValueError(
            "per-sample opacities require a batched 4-d image with matching "
            "batch size"
        )
    if isinstance(image, np.ndarray):
        return arr.reshape(-1, 1, 1, 1).astype(image.dtype, copy=False)
    return torch.as_tensor(arr, dtype=image.dtype, device=image.device).view(-1, 1, 1, 1)


def compose(normal, anomaly, mask, opacity):
    """Blend an anomaly layer over a normal image inside the masked region.

    Returns ``(1-m)*normal + opacity*(m*anomaly) + (1-opacity)*(m*normal)``
    pixel-wise. Pixels outside the mask are the normal image bit-for-bit, and
    the blend is convex, so in-range inputs stay in range.
    """
    if tuple(normal.shape) != tuple(anomaly.shape):
        raise ValueError(
            f"normal {tuple(normal.shape)} and anomaly {tuple(anomaly.shape)} "
            "shapes must match"
        )
    _check_spatial(normal, mask)
    if float(mask.min()) < 0.0 or float(mask.max()) > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    m = _align_mask(mask, normal)
    b = _align_factor(opacity, normal)
    return (1.0 - m) * normal + b * (m * anomaly) + (1.0 - b) * (m * normal)


def _opacity_at(schedule: TransparencySchedule, t, image):
    """Schedule lookup for a scalar timestep or a per-sample timestep vector."""
    if np.ndim(t) == 0:
        check_timestep(int(t), schedule.steps)
        return float(schedule.betas[int(t)])
    idx = np.asarray(t).reshape(-1)
    if idx.min() < 0 or idx.max() > schedule.steps:
        raise ValueError(f"timesteps must lie in [0, {schedule.steps}]")
    return _align_factor(schedule.betas[idx], image)


def forward_sample(normal, anomaly, mask, schedule: TransparencySchedule, t):
    """Composite the anomaly at the opacity the schedule assigns to step ``t``.

    ``t`` may be a scalar in [0, T], or a per-sample integer vector when the
    inputs are batched. ``t = 0`` returns the normal image exactly.
    """
    if np.ndim(t) == 0:
        check_timestep(int(t), schedule.steps)
        return compose(normal, anomaly, mask, float(schedule.betas[int(t)]))
    return compose(normal, anomaly, mask, np.asarray(schedule.betas)[np.asarray(t)])


def reverse_step(x_t, mask, anomaly, normal, schedule: TransparencySchedule, t):
    """One opacity-removal transition from step ``t`` to ``t - 1``.

    Applies ``x_t - db*(m*anomaly) + db*(m*normal)`` with
    ``db = b_t - b_{t-1}``, then clamps to [-1, 1] (predicted inputs can
    overshoot the valid range; ground-truth inputs never trigger the clamp).
    ``t`` must be at least 1: step 0 has no predecessor.
    """
    if np.ndim(t) == 0:
        check_timestep(int(t), schedule.steps, minimum=1)
        t_now, t_prev = int(t), int(t) - 1
    else:
        t_now = np.asarray(t).reshape(-1)
        if t_now.min() < 1 or t_now.max() > schedule.steps:
            raise ValueError(f"timesteps must lie in [1, {schedule.steps}]")
        t_prev = t_now - 1
    _check_spatial(x_t, mask)
    if tuple(x_t.shape) != tuple(anomaly.shape) or tuple(x_t.shape) != tuple(normal.shape):
        raise ValueError("x_t, anomaly and normal shapes must match")
    delta = _opacity_at(schedule, t_now, x_t) - _opacity_at(schedule, t_prev, x_t)
    m = _align_mask(mask, x_t)
    out = x_t - delta * (m * anomaly) + delta * (m * normal)
    return out.clip(*VALUE_RANGE)
