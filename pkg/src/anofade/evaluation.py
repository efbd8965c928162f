"""Detection and localization metrics plus parameter-sweep utilities.

Image-level detection quality is the area under the ROC curve of per-image
scores (rank statistic; ties count half). Localization quality is the area
under the per-region-overlap curve: at every threshold, the mean recall over
8-connected ground-truth regions is plotted against the false-positive rate
on anomaly-free pixels, integrated up to an FPR limit and normalized by it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

__all__ = [
    "EvalRecord",
    "auroc",
    "label_regions",
    "pro_curve",
    "aupro",
    "evaluate_maps",
    "sweep_fusion",
    "sweep_inference",
]

DEFAULT_FPR_LIMIT = 0.3

#: Above this many total pixels the PRO curve falls back to quantile thresholds.
EXACT_THRESHOLD_PIXEL_LIMIT = 1 << 21
QUANTILE_THRESHOLDS = 200

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class EvalRecord:
    """One test image's outputs next to its ground truth."""

    image_id: str
    score: float
    label: int  # 0 normal, 1 anomalous
    pred_map: np.ndarray | None = None
    gt_map: np.ndarray | None = None


def auroc(scores, labels) -> float:
    """Probability that a random anomalous score outranks a random normal one.

    Computed from rank sums (ties contribute 1/2). Raises if only one class is
    present, since the metric is undefined there.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-d sequences")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both a normal and an anomalous example")
    ranks = rankdata(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def label_regions(mask: np.ndarray):
    """8-connected components of a binary mask: (labels, count)."""
    return ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)


def _flatten_set(pred_maps, gt_maps):
    """Global flat arrays: predictions, region ids (0 = background), region sizes."""
    preds, regions = [], []
    offset = 0
    for pred, gt in zip(pred_maps, gt_maps):
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.zeros(pred.shape) if gt is None else np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground-truth maps must share shapes")
        labels, count = label_regions(gt)
        labels = labels.astype(np.int64)
        labels[labels > 0] += offset
        offset += count
        preds.append(pred.reshape(-1))
        regions.append(labels.reshape(-1))
    return np.concatenate(preds), np.concatenate(regions), offset


def pro_curve(pred_maps, gt_maps, num_thresholds: int | None = None):
    """Per-region-overlap curve points (fpr, pro), both ascending from (0, 0).

    A pixel counts as predicted anomalous at threshold ``v`` when its value is
    >= v; the curve is evaluated at every distinct predicted value, or at
    ``num_thresholds`` uniform quantiles when given (the automatic policy
    switches to quantiles on very large sets).
    """
    preds, regions, n_regions = _flatten_set(pred_maps, gt_maps)
    if n_regions == 0:
        raise ValueError("no anomalous region in any ground-truth map")
    background = regions == 0
    n_background = int(background.sum())
    if n_background == 0:
        raise ValueError("no anomaly-free pixels to measure false positives on")

    if num_thresholds is None and preds.size > EXACT_THRESHOLD_PIXEL_LIMIT:
        num_thresholds = QUANTILE_THRESHOLDS

    region_sizes = np.bincount(regions, minlength=n_regions + 1).astype(np.float64)

    order = np.argsort(-preds, kind="stable")
    sorted_preds = preds[order]
    sorted_regions = regions[order]
    fp_steps = background[order].astype(np.float64)

    overlap_steps = np.zeros_like(fp_steps)
    fg = sorted_regions > 0
    overlap_steps[fg] = 1.0 / region_sizes[sorted_regions[fg]]

    fpr = np.cumsum(fp_steps) / n_background
    pro = np.cumsum(overlap_steps) / n_regions

    # keep one point per distinct threshold: last index of each equal run
    keep = np.ones(sorted_preds.size, dtype=bool)
    keep[:-1] = sorted_preds[:-1] != sorted_preds[1:]
    fpr, pro, thresholds = fpr[keep], pro[keep], sorted_preds[keep]

    if num_thresholds is not None and thresholds.size > num_thresholds:
        wanted = np.quantile(thresholds, np.linspace(0, 1, num_thresholds))
        idx = np.unique(np.searchsorted(-thresholds, -wanted, side="right") - 1)
        idx = idx[(idx >= 0) & (idx < thresholds.size)]
        fpr, pro = fpr[idx], pro[idx]

    return np.concatenate([[0.0], fpr]), np.concatenate([[0.0], pro])


def _area_up_to(fpr: np.ndarray, pro: np.ndarray, fpr_limit: float) -> float:
    """Trapezoidal area under (fpr, pro) from 0 to ``fpr_limit``."""
    if fpr[-1] < fpr_limit:  # prediction range exhausted before the limit
        fpr = np.append(fpr, fpr_limit)
        pro = np.append(pro, pro[-1])
    inside = fpr <= fpr_limit
    last = int(np.nonzero(inside)[0][-1])
    xs, ys = list(fpr[: last + 1]), list(pro[: last + 1])
    if fpr[last] < fpr_limit:
        nxt = last + 1
        frac = (fpr_limit - fpr[last]) / (fpr[nxt] - fpr[last])
        xs.append(fpr_limit)
        ys.append(pro[last] + frac * (pro[nxt] - pro[last]))
    return float(np.trapezoid(ys, xs))


def aupro(pred_maps, gt_maps, fpr_limit: float = DEFAULT_FPR_LIMIT,
          num_thresholds: int | None = None) -> float:
    """Normalized area under the per-region-overlap curve up to ``fpr_limit``."""
    if not (0.0 < fpr_limit <= 1.0):
        raise ValueError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    fpr, pro = pro_curve(pred_maps, gt_maps, num_thresholds)
    return _area_up_to(fpr, pro, fpr_limit) / fpr_limit


def evaluate_maps(records, fpr_limit: float = DEFAULT_FPR_LIMIT) -> dict:
    """AUROC over record scores plus AUPRO over their maps (when present)."""
    scores = [r.score for r in records]
    labels = [r.label for r in records]
    result = {"auroc": auroc(scores, labels)}
    with_maps = [r for r in records if r.pred_map is not None]
    if with_maps and any(r.gt_map is not None and np.any(r.gt_map) for r in with_maps):
        result["aupro"] = aupro(
            [r.pred_map for r in with_maps],
            [r.gt_map for r in with_maps],
            fpr_limit,
        )
    return result


# ---------------------------------------------------------------------------
# Parameter sweeps
# ---------------------------------------------------------------------------


def sweep_fusion(traces, labels, gt_maps, parameter: str, values,
                 fpr_limit: float = DEFAULT_FPR_LIMIT, **fuse_defaults) -> list[dict]:
    """Sweep a fusion-stage parameter over cached traces (no re-inference).

    ``parameter`` is ``lambda`` (blend weight) or ``kernel`` (filter size).
    Returns one metrics row per value.
    """
    from .inference import fuse_masks

    if parameter not in ("lambda", "kernel"):
        raise ValueError(f"fusion sweep supports lambda/kernel, got {parameter!r}")
    rows = []
    for value in values:
        kwargs = dict(fuse_defaults)
        if parameter == "lambda":
            kwargs["fuse_weight"] = float(value)
        else:
            kwargs["kernel_size"] = int(value)
        maps_scores = [fuse_masks(trace, **kwargs) for trace in traces]
        rows.append(_metric_row(parameter, value,
                                [s for _, s in maps_scores],
                                [m for m, _ in maps_scores],
                                labels, gt_maps, fpr_limit))
    return rows


def sweep_inference(model, images, labels, gt_maps, parameter: str, values,
                    base_shape: str = "linear", base_steps: int = 20,
                    fpr_limit: float = DEFAULT_FPR_LIMIT, **fuse_defaults) -> list[dict]:
    """Sweep a reverse-process parameter (``steps`` or ``schedule``).

    Each value requires a fresh inference pass over all images.
    """
    from .diffusion import make_schedule
    from .inference import score_image

    if parameter not in ("steps", "schedule"):
        raise ValueError(f"inference sweep supports steps/schedule, got {parameter!r}")
    rows = []
    for value in values:
        if parameter == "steps":
            schedule = make_schedule(base_shape, int(value))
        else:
            schedule = make_schedule(str(value), base_steps)
        traces = [score_image(model, img, schedule, **fuse_defaults) for img in images]
        rows.append(_metric_row(parameter, value,
                                [t.score for t in traces],
                                [t.mask_final for t in traces],
                                labels, gt_maps, fpr_limit))
    return rows


def _metric_row(parameter, value, scores, maps, labels, gt_maps, fpr_limit) -> dict:
    row = {"parameter": parameter, "value": value,
           "auroc": auroc(scores, labels), "aupro": float("nan")}
    if gt_maps is not None and any(g is not None and np.any(g) for g in gt_maps):
        row["aupro"] = aupro(maps, gt_maps, fpr_limit)
    return row
