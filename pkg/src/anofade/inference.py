"""Iterative anomaly removal at test time, mask accumulation and fusion.

The engine starts from the test image with an all-zero mask prior, runs T
reverse transitions (predict the mask / anomaly / normal layers, remove one
opacity increment, binarize the mask for the next step's prior) and keeps the
soft mask of every step. Two per-pixel evidence maps come out of the trace:

    disc   mean of the per-step soft masks           (discriminative cue)
    recon  scaled squared error between input and restored image

Their weighted blend, smoothed by a mean filter, is the final anomaly map;
the image-level anomaly score is its maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import uniform_filter

from .diffusion import TransparencySchedule, make_schedule, reverse_step
from .model import build_input, positional_encoding
from .validation import check_odd, check_unit_range

__all__ = [
    "InferenceTrace",
    "OracleDenoiser",
    "binarize",
    "run_reverse",
    "fuse_masks",
    "score_image",
    "scaled_kernel_size",
    "DEFAULT_FUSE_WEIGHT",
    "DEFAULT_KERNEL_SIZE",
    "DEFAULT_MASK_THRESHOLD",
]

DEFAULT_FUSE_WEIGHT = 0.95
DEFAULT_KERNEL_SIZE = 7
DEFAULT_MASK_THRESHOLD = 0.5
KERNEL_REFERENCE_SIZE = 224  # resolution the default kernel size is tuned for

MASK_SOURCES = ("blend", "disc", "recon", "last")


def scaled_kernel_size(image_size: int) -> int:
    """Mean-filter size proportional to the input resolution.

    The default 7x7 kernel matches 224x224 inputs; smaller inputs get a
    proportionally smaller (odd, at least 3) aggregation window so the filter
    keeps smoothing locally instead of blurring whole regions away.
    """
    size = round(DEFAULT_KERNEL_SIZE * image_size / KERNEL_REFERENCE_SIZE)
    size = max(3, size)
    return size if size % 2 else size + 1


@dataclass
class InferenceTrace:
    """Everything one test image produced: per-step states and fused outputs."""

    input_image: np.ndarray           # (H, W, C) as given to the engine
    images: list = field(default_factory=list)  # x after each step; last is x_0
    masks: list = field(default_factory=list)   # soft mask per step, first = step T
    mask_disc: np.ndarray | None = None
    mask_recon: np.ndarray | None = None
    mask_final: np.ndarray | None = None
    score: float | None = None

    @property
    def restored(self) -> np.ndarray:
        """The fully reconstructed anomaly-free image x_0."""
        return self.images[-1]


class OracleDenoiser:
    """Stand-in predictor that returns fixed ground-truth layers.

    Exercises the reverse engine independently of any learning: with the true
    mask, anomaly and normal layers the engine must restore the clean image
    exactly (up to accumulated float error).
    """

    def __init__(self, mask: np.ndarray, anomaly: np.ndarray, normal: np.ndarray,
                 pe_channels: int = 4):
        self.pe_channels = pe_channels
        self._mask = torch.from_numpy(np.asarray(mask, dtype=np.float32))[None, None]
        self._anomaly = torch.from_numpy(
            np.asarray(anomaly, dtype=np.float32)
        ).permute(2, 0, 1)[None]
        self._normal = torch.from_numpy(
            np.asarray(normal, dtype=np.float32)
        ).permute(2, 0, 1)[None]

    def eval(self):
        return self

    def __call__(self, stacked: torch.Tensor, t: torch.Tensor):
        b = stacked.shape[0]
        return (self._mask.expand(b, -1, -1, -1),
                self._anomaly.expand(b, -1, -1, -1),
                self._normal.expand(b, -1, -1, -1))


def binarize(mask, tau: float = DEFAULT_MASK_THRESHOLD):
    """Threshold a soft mask to {0, 1}; values equal to ``tau`` map to 1."""
    if isinstance(mask, torch.Tensor):
        return (mask >= tau).to(mask.dtype)
    return (np.asarray(mask) >= tau).astype(np.float32)


def run_reverse(model, image: np.ndarray, schedule: TransparencySchedule,
                steps: int | None = None, *,
                mask_threshold: float = DEFAULT_MASK_THRESHOLD) -> InferenceTrace:
    """Run the T-step reverse process on one (H, W, C) image in [-1, 1].

    The mask prior starts at zero; each step feeds the binarized previous mask
    back in. Stores the soft mask and the stepped image for every t from T
    down to 1, so both lists have exactly T entries and the last image is the
    restored x_0.
    """
    if steps is not None and steps != schedule.steps:
        schedule = make_schedule(schedule.shape, steps)
    image = np.asarray(image, dtype=np.float32)
    trace = InferenceTrace(input_image=image)

    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    pe_channels = getattr(model, "pe_channels", 4)
    pe = torch.from_numpy(positional_encoding(image.shape[0], image.shape[1], pe_channels))

    x = torch.from_numpy(image).permute(2, 0, 1)[None]
    prior = torch.zeros(1, 1, image.shape[0], image.shape[1])
    try:
        with torch.no_grad():
            for t in range(schedule.steps, 0, -1):
                stacked = build_input(x, prior, pe)
                soft_mask, anomaly, normal = model(stacked, torch.as_tensor([t]))
                x = reverse_step(x, soft_mask, anomaly, normal, schedule, t)
                trace.masks.append(soft_mask[0, 0].numpy().copy())
                trace.images.append(x[0].permute(1, 2, 0).numpy().copy())
                prior = binarize(soft_mask, mask_threshold)
    finally:
        if was_training and hasattr(model, "train"):
            model.train(True)
    return trace


def fuse_masks(trace: InferenceTrace, fuse_weight: float = DEFAULT_FUSE_WEIGHT,
               kernel_size: int = DEFAULT_KERNEL_SIZE, *,
               mask_source: str = "blend",
               binarized_disc: bool = False,
               mask_threshold: float = DEFAULT_MASK_THRESHOLD):
    """Fuse the trace into the final anomaly map and image score.

    ``mask_source`` selects the evidence: ``blend`` mixes the mean-mask map
    and the reconstruction-error map by ``fuse_weight``; ``disc`` / ``recon``
    are the single-source variants (identical to fuse_weight 1 / 0); ``last``
    uses only the final step's soft mask. ``binarized_disc`` averages
    thresholded instead of soft per-step masks. The blended map is smoothed by
    a zero-padded ``kernel_size`` x ``kernel_size`` mean filter; the score is
    the smoothed map's maximum. Updates the trace in place and returns
    ``(mask_final, score)``.
    """
    check_unit_range("fuse_weight", np.asarray(fuse_weight))
    check_odd("kernel_size", kernel_size)
    if mask_source not in MASK_SOURCES:
        raise ValueError(f"mask_source must be one of {MASK_SOURCES}, got {mask_source!r}")
    if not trace.masks:
        raise ValueError("trace holds no per-step masks; run the reverse process first")

    stack = np.stack(trace.masks)
    if binarized_disc:
        stack = binarize(stack, mask_threshold)
    mask_disc = stack.mean(axis=0)
    diff = trace.input_image - trace.restored
    mask_recon = (diff**2).mean(axis=-1) / 4.0  # max possible sq. error is 2^2

    if mask_source == "disc":
        fuse_weight = 1.0
    elif mask_source == "recon":
        fuse_weight = 0.0

    if mask_source == "last":
        blended = trace.masks[-1]
    else:
        blended = fuse_weight * mask_disc + (1.0 - fuse_weight) * mask_recon

    mask_final = uniform_filter(blended.astype(np.float32), size=kernel_size,
                                mode="constant", cval=0.0)
    score = float(mask_final.max())

    trace.mask_disc = mask_disc
    trace.mask_recon = mask_recon
    trace.mask_final = mask_final
    trace.score = score
    return mask_final, score


def score_image(model, image: np.ndarray, schedule: TransparencySchedule, *,
                steps: int | None = None,
                fuse_weight: float = DEFAULT_FUSE_WEIGHT,
                kernel_size: int = DEFAULT_KERNEL_SIZE,
                mask_source: str = "blend",
                binarized_disc: bool = False,
                mask_threshold: float = DEFAULT_MASK_THRESHOLD) -> InferenceTrace:
    """Reverse process plus fusion; returns the fully populated trace."""
    trace = run_reverse(model, image, schedule, steps, mask_threshold=mask_threshold)
    fuse_masks(trace, fuse_weight, kernel_size, mask_source=mask_source,
               binarized_disc=binarized_disc, mask_threshold=mask_threshold)
    return trace
