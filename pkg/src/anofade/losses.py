"""Training losses for the three prediction heads plus the step-consistency
term, and their unweighted sum.

normal head      1 - SSIM  +  L1          (structure + absolute error)
mask head        5 * focal  +  smooth L1  (class imbalance + calibration)
anomaly head     L2                       (plain reconstruction)
consistency      L2 between the predicted previous-step image and the one the
                 ground-truth layers produce at the previous opacity level
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import TransparencySchedule, forward_sample, reverse_step

__all__ = [
    "ssim_loss",
    "normal_loss",
    "focal_loss",
    "mask_loss",
    "anomaly_loss",
    "consistency_loss",
    "LossBreakdown",
    "combined_loss",
]

FOCAL_GAMMA = 2.0
MASK_FOCAL_WEIGHT = 5.0
PROB_EPS = 1e-7


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x[None] if x.ndim == 3 else x


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_loss(pred: torch.Tensor, target: torch.Tensor, window_size: int = 11,
              sigma: float = 1.5, data_range: float = 2.0) -> torch.Tensor:
    """1 - mean windowed SSIM, in [0, 2]; 0 for identical inputs.

    Local statistics come from a Gaussian window (valid positions only); the
    window shrinks to fit inputs smaller than ``window_size``.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    pred, target = _batched(pred), _batched(target)
    h, w = pred.shape[-2:]
    size = min(window_size, h, w)
    if size % 2 == 0:
        size -= 1

    channels = pred.shape[1]
    window = _gaussian_window(size, sigma, pred.dtype, pred.device)
    kernel = window.expand(channels, 1, size, size)

    def local_mean(x):
        return F.conv2d(x, kernel, groups=channels)

    mu_p, mu_t = local_mean(pred), local_mean(target)
    var_p = local_mean(pred * pred) - mu_p**2
    var_t = local_mean(target * target) - mu_t**2
    cov = local_mean(pred * target) - mu_p * mu_t

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    ssim_map = ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / (
        (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
    )
    return 1.0 - ssim_map.mean()


def normal_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """SSIM loss plus mean absolute error against the clean image."""
    return ssim_loss(pred, target) + torch.mean(torch.abs(pred - target))


def focal_loss(pred: torch.Tensor, target: torch.Tensor,
               gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Mean of -(1 - p_true)^gamma * log(p_true) over all pixels.

    ``pred`` holds anomaly probabilities, ``target`` binary labels; inputs are
    clamped away from {0, 1} so the log stays finite. gamma = 0 reduces to
    binary cross-entropy.
    """
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    p_true = target * p + (1.0 - target) * (1.0 - p)
    return torch.mean(-((1.0 - p_true) ** gamma) * torch.log(p_true))


def mask_loss(pred: torch.Tensor, target: torch.Tensor,
              focal_weight: float = MASK_FOCAL_WEIGHT,
              gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Weighted focal term plus smooth L1 against the binary mask."""
    return focal_weight * focal_loss(pred, target, gamma) + F.smooth_l1_loss(
        pred, target, beta=1.0
    )


def anomaly_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error against the anomaly appearance layer."""
    return F.mse_loss(pred, target)


def consistency_loss(x_t: torch.Tensor, predictions, ground_truth,
                     schedule: TransparencySchedule, t) -> torch.Tensor:
    """Couple the heads through the reverse transition they jointly drive.

    ``predictions = (mask, anomaly, normal)`` from the model and
    ``ground_truth = (mask, anomaly, clean_image)`` produce, respectively, the
    predicted previous-step image and the reference composition one opacity
    level down; the loss is their mean squared difference. Requires t >= 1.
    """
    pred_mask, pred_anomaly, pred_normal = predictions
    gt_mask, gt_anomaly, gt_clean = ground_truth
    stepped = reverse_step(x_t, pred_mask, pred_anomaly, pred_normal, schedule, t)
    t_prev = np.asarray(t) - 1 if np.ndim(t) else int(t) - 1
    reference = forward_sample(gt_clean, gt_anomaly, gt_mask, schedule, t_prev)
    return F.mse_loss(stepped, reference)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term scalar losses; ``total`` is their exact float sum."""

    normal: float
    mask: float
    anomaly: float
    consistency: float

    @property
    def total(self) -> float:
        return self.normal + self.mask + self.anomaly + self.consistency

    def as_row(self) -> dict:
        return {
            "loss_normal": self.normal,
            "loss_mask": self.mask,
            "loss_anomaly": self.anomaly,
            "loss_consistency": self.consistency,
            "loss_total": self.total,
        }


def combined_loss(predictions, targets, x_t: torch.Tensor,
                  schedule: TransparencySchedule, t,
                  focal_weight: float = MASK_FOCAL_WEIGHT,
                  gamma: float = FOCAL_GAMMA):
    """Sum of the four terms; returns (total tensor, LossBreakdown).

    ``predictions = (mask, anomaly, normal)`` from the model;
    ``targets = (mask, anomaly, clean_image)`` ground truth.
    """
    pred_mask, pred_anomaly, pred_normal = predictions
    gt_mask, gt_anomaly, gt_clean = targets
    l_n = normal_loss(pred_normal, gt_clean)
    l_m = mask_loss(pred_mask, gt_mask, focal_weight, gamma)
    l_a = anomaly_loss(pred_anomaly, gt_anomaly)
    l_c = consistency_loss(x_t, predictions, (gt_mask, gt_anomaly, gt_clean), schedule, t)
    total = l_n + l_m + l_a + l_c
    breakdown = LossBreakdown(*(float(v.detach()) for v in (l_n, l_m, l_a, l_c)))
    return total, breakdown
