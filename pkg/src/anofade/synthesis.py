"""Synthetic anomaly generation for training and desk-scale datasets.

Training samples are built from normal images only: a gradient-noise field is
thresholded into a blob-shaped anomaly mask, an anomaly appearance is drawn
from a texture pool (or by self-augmentation), and the pair is composited onto
the normal image at the opacity the schedule assigns to a random timestep.
The same noise field, re-thresholded at a shifted level, yields a deliberately
eroded/dilated "previous mask estimate" that mimics imperfect localization
during inference; it is dropped (all zeros) for a fixed fraction of samples.

Everything here is numpy, channels-last, deterministic given a seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import TransparencySchedule, compose
from .validation import check_positive, check_unit_range

__all__ = [
    "perlin_noise",
    "generate_mask",
    "threshold_shift_mask",
    "simulate_prev_mask",
    "TexturePool",
    "make_anomaly_source",
    "SyntheticSample",
    "make_training_batch",
    "normal_texture",
    "make_texture_dataset",
    "make_toy_test_set",
]

PREV_MASK_DROP_PROB = 0.25
PREV_MASK_MAX_SHIFT = 0.2  # fraction of the field's value range
EMPTY_MASK_RETRIES = 10


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _fade(u: np.ndarray) -> np.ndarray:
    return u * u * u * (u * (u * 6.0 - 15.0) + 10.0)


def _perlin_octave(height, width, cells_y, cells_x, rng) -> np.ndarray:
    """Single octave of 2-d gradient noise with random unit lattice gradients."""
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(cells_y + 1, cells_x + 1))
    grad_y, grad_x = np.sin(angles), np.cos(angles)

    ys = (np.arange(height) + 0.5) * (cells_y / height)
    xs = (np.arange(width) + 0.5) * (cells_x / width)
    iy = np.minimum(ys.astype(int), cells_y - 1)
    ix = np.minimum(xs.astype(int), cells_x - 1)
    fy = (ys - iy)[:, None]
    fx = (xs - ix)[None, :]

    def corner_dot(dy, dx):
        gy = grad_y[iy + dy][:, ix + dx]
        gx = grad_x[iy + dy][:, ix + dx]
        return gx * (fx - dx) + gy * (fy - dy)

    uy, ux = _fade(fy), _fade(fx)
    top = corner_dot(0, 0) * (1 - ux) + corner_dot(0, 1) * ux
    bottom = corner_dot(1, 0) * (1 - ux) + corner_dot(1, 1) * ux
    return top * (1 - uy) + bottom * uy


def perlin_noise(height: int, width: int, seed, octaves: int = 2, base_cells: int = 4) -> np.ndarray:
    """Fractal gradient-noise field of shape (height, width), float64.

    Octaves double the lattice frequency and halve the amplitude. The field is
    smooth, roughly zero-mean, and identical for identical seeds.
    """
    check_positive("height", height)
    check_positive("width", width)
    check_positive("octaves", octaves)
    rng = _rng(seed)
    field = np.zeros((height, width), dtype=np.float64)
    amplitude = 1.0
    cells = base_cells
    for _ in range(octaves):
        cy = max(1, min(cells, height))
        cx = max(1, min(cells, width))
        field += amplitude * _perlin_octave(height, width, cy, cx, rng)
        amplitude *= 0.5
        cells *= 2
    return field


def _fallback_rectangle(height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.float32)
    mask[height // 4 : height - height // 4, width // 4 : width - width // 4] = 1.0
    return mask


def generate_mask(field: np.ndarray, threshold: float, rng=None) -> np.ndarray:
    """Binary mask of field values strictly above ``threshold``.

    An empty result is rejected: the threshold is redrawn below the field
    median up to a retry budget, after which a fixed centered rectangle is
    returned so callers always receive a usable anomaly region.
    """
    rng = _rng(0 if rng is None else rng)
    mask = (field > threshold).astype(np.float32)
    retries = 0
    lo, mid = float(field.min()), float(np.median(field))
    while mask.sum() == 0 and retries < EMPTY_MASK_RETRIES:
        mask = (field > rng.uniform(lo, mid)).astype(np.float32)
        retries += 1
    if mask.sum() == 0:
        return _fallback_rectangle(*field.shape)
    return mask


def threshold_shift_mask(field: np.ndarray, threshold: float, delta: float) -> np.ndarray:
    """Re-threshold the field at ``threshold + delta`` (no rejection)."""
    return (field > threshold + delta).astype(np.float32)


def simulate_prev_mask(field: np.ndarray, gt_threshold: float, seed,
                       drop_prob: float = PREV_MASK_DROP_PROB,
                       max_shift: float = PREV_MASK_MAX_SHIFT) -> np.ndarray:
    """Imperfect previous-step mask estimate for training.

    With probability ``drop_prob`` the estimate is dropped entirely (all
    zeros). Otherwise the ground-truth threshold is shifted by a uniform
    offset of up to ``max_shift`` of the field's value range, producing a
    grown or shrunken variant of the true mask.
    """
    rng = _rng(seed)
    if rng.random() < drop_prob:
        return np.zeros(field.shape, dtype=np.float32)
    span = float(field.max() - field.min())
    delta = rng.uniform(-max_shift, max_shift) * span
    return threshold_shift_mask(field, gt_threshold, delta)


# ---------------------------------------------------------------------------
# Anomaly appearance sources
# ---------------------------------------------------------------------------


class TexturePool:
    """Pool of anomaly-appearance textures: procedural generators plus an
    optional directory of user-supplied images (decoded lazily).

    ``sample`` returns a (H, W, 3) float32 texture in [-1, 1].
    """

    PROCEDURAL = ("checker", "noise", "field", "stripes", "dots")

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        self._files: list[Path] = []
        if self.directory is not None:
            if not self.directory.is_dir():
                raise ValueError(f"texture directory not found: {self.directory}")
            exts = {".png", ".jpg", ".jpeg", ".bmp"}
            self._files = sorted(
                p for p in self.directory.iterdir() if p.suffix.lower() in exts
            )
            if not self._files:
                raise ValueError(f"texture directory {self.directory} holds no images")

    def sample(self, rng, height: int, width: int) -> np.ndarray:
        rng = _rng(rng)
        if self._files and rng.random() < 0.5:
            return self._sample_file(rng, height, width)
        kind = self.PROCEDURAL[rng.integers(len(self.PROCEDURAL))]
        return getattr(self, f"_{kind}")(rng, height, width)

    def _sample_file(self, rng, height, width) -> np.ndarray:
        from .data import load_texture  # local import: file textures are optional

        path = self._files[rng.integers(len(self._files))]
        return load_texture(path, height, width)

    @staticmethod
    def _two_colors(rng):
        c0 = rng.uniform(-1.0, 1.0, size=3)
        c1 = rng.uniform(-1.0, 1.0, size=3)
        return c0, c1

    def _checker(self, rng, height, width) -> np.ndarray:
        cell = int(rng.integers(2, max(3, min(height, width) // 3)))
        c0, c1 = self._two_colors(rng)
        yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        parity = ((yy // cell + xx // cell) % 2).astype(np.float64)[..., None]
        return ((1 - parity) * c0 + parity * c1).astype(np.float32)

    def _noise(self, rng, height, width) -> np.ndarray:
        # contrast-boosted colorized gradient noise: saturated blobby texture
        planes = [perlin_noise(height, width, rng, octaves=3, base_cells=8) for _ in range(3)]
        tex = np.stack(planes, axis=-1)
        span = np.abs(tex).max() or 1.0
        return np.tanh(3.0 * tex / span).astype(np.float32)

    def _field(self, rng, height, width) -> np.ndarray:
        color = rng.uniform(-1.0, 1.0, size=3)
        return np.broadcast_to(color, (height, width, 3)).astype(np.float32)

    def _stripes(self, rng, height, width) -> np.ndarray:
        period = int(rng.integers(2, max(3, min(height, width) // 4)))
        c0, c1 = self._two_colors(rng)
        axis = rng.integers(2)
        coords = np.arange(height if axis == 0 else width)
        band = ((coords // period) % 2).astype(np.float64)
        band = band[:, None] if axis == 0 else band[None, :]
        band = np.broadcast_to(band, (height, width))[..., None]
        return ((1 - band) * c0 + band * c1).astype(np.float32)

    def _dots(self, rng, height, width) -> np.ndarray:
        period = int(rng.integers(3, max(4, min(height, width) // 3)))
        radius = max(1.0, period / 3.0)
        c0, c1 = self._two_colors(rng)
        yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        dy = (yy % period) - period / 2.0
        dx = (xx % period) - period / 2.0
        inside = ((dy**2 + dx**2) <= radius**2).astype(np.float64)[..., None]
        return ((1 - inside) * c0 + inside * c1).astype(np.float32)


def _augment_texture(tex: np.ndarray, rng) -> np.ndarray:
    if rng.random() < 0.5:
        tex = tex[:, ::-1]
    if tex.shape[0] == tex.shape[1]:
        tex = np.rot90(tex, k=int(rng.integers(4)), axes=(0, 1))
    return np.ascontiguousarray(tex)


def _self_augment(normal: np.ndarray, rng) -> np.ndarray:
    out = normal
    if normal.shape[0] == normal.shape[1]:
        out = np.rot90(normal, k=int(rng.integers(1, 4)), axes=(0, 1))
    out = out[..., rng.permutation(3)]  # channel shuffle breaks the palette
    scale = rng.uniform(0.5, 1.5, size=3)
    shift = rng.uniform(-0.5, 0.5, size=3)
    return np.clip(out * scale + shift, -1.0, 1.0).astype(np.float32)


def make_anomaly_source(normal: np.ndarray, source_pool: TexturePool, seed,
                        mode: str = "auto") -> np.ndarray:
    """Anomaly appearance layer matching the normal image's spatial dims.

    ``texture`` draws an augmented texture from the pool; ``self`` rotates and
    color-jitters the normal image itself; ``auto`` picks one at random.
    """
    if source_pool is None:
        raise ValueError("anomaly source pool is not configured")
    rng = _rng(seed)
    if mode == "auto":
        mode = "texture" if rng.random() < 0.5 else "self"
    if mode == "texture":
        tex = source_pool.sample(rng, normal.shape[0], normal.shape[1])
        return _augment_texture(tex, rng)
    if mode == "self":
        return _self_augment(normal, rng)
    raise ValueError(f"unknown anomaly source mode {mode!r}")


# ---------------------------------------------------------------------------
# Training batches
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSample:
    """One training sample: the composited image plus every layer that built it."""

    image_t: np.ndarray    # (H, W, C) composition at the sampled opacity
    gt_mask: np.ndarray    # (H, W) binary anomaly mask
    gt_anomaly: np.ndarray  # (H, W, C) anomaly appearance layer
    gt_normal: np.ndarray  # (H, W, C) clean image
    prev_mask: np.ndarray  # (H, W) simulated previous mask estimate
    t: int

    def recompose(self, schedule: TransparencySchedule) -> np.ndarray:
        return compose(self.gt_normal, self.gt_anomaly, self.gt_mask,
                       float(schedule.betas[self.t]))


def _random_mask(height, width, rng, octaves, base_cells, max_area):
    field = perlin_noise(height, width, rng, octaves=octaves, base_cells=base_cells)
    area = rng.uniform(0.05, min(0.45, max_area))
    threshold = float(np.quantile(field, 1.0 - area))
    mask = generate_mask(field, threshold, rng)
    return field, threshold, mask


def make_training_batch(normals, schedule: TransparencySchedule, seed, *,
                        pool: TexturePool | None = None,
                        octaves: int = 2, base_cells: int = 4,
                        max_mask_area: float = 0.5,
                        rotate: bool = True) -> list[SyntheticSample]:
    """Turn a list of normal images into a half-anomalous training batch.

    The first ``len(normals) // 2`` samples receive a synthetic anomaly
    composited at a uniformly drawn timestep; the rest stay clean with a zero
    mask and a zero anomaly layer. Normal samples still get a simulated
    previous mask drawn from an unrelated noise field, so the network learns
    to reject spurious localization priors. Rotation augmentation (multiples
    of 90 degrees) is applied to every sample before compositing.
    """
    if not len(normals):
        raise ValueError("training batch needs at least one normal image")
    check_unit_range("max_mask_area", np.asarray(max_mask_area))
    pool = pool if pool is not None else TexturePool()
    rng = _rng(seed)
    n_anomalous = len(normals) // 2

    samples = []
    for i, base in enumerate(normals):
        img = np.asarray(base, dtype=np.float32)
        if rotate and img.shape[0] == img.shape[1]:
            img = np.ascontiguousarray(np.rot90(img, k=int(rng.integers(4)), axes=(0, 1)))
        h, w = img.shape[:2]
        t = int(rng.integers(1, schedule.steps + 1))
        field, threshold, mask = _random_mask(h, w, rng, octaves, base_cells, max_mask_area)
        prev_mask = simulate_prev_mask(field, threshold, rng)
        if i < n_anomalous:
            anomaly = make_anomaly_source(img, pool, rng)
            image_t = compose(img, anomaly, mask, float(schedule.betas[t]))
            samples.append(SyntheticSample(image_t, mask, anomaly, img, prev_mask, t))
        else:
            zeros_mask = np.zeros((h, w), dtype=np.float32)
            zeros_img = np.zeros_like(img)
            samples.append(SyntheticSample(img, zeros_mask, zeros_img, img, prev_mask, t))
    return samples


# ---------------------------------------------------------------------------
# Desk-scale procedural dataset
# ---------------------------------------------------------------------------

TOY_PALETTE = (np.array([-0.55, -0.25, 0.05]), np.array([0.45, 0.60, 0.40]))


def normal_texture(height: int, width: int, seed) -> np.ndarray:
    """A smooth two-tone texture: the normal appearance of the toy domain."""
    field = perlin_noise(height, width, seed, octaves=2, base_cells=3)
    u = (field - field.min()) / max(float(field.max() - field.min()), 1e-9)
    c0, c1 = TOY_PALETTE
    return (c0 + u[..., None] * (c1 - c0)).astype(np.float32)


def make_texture_dataset(count: int, size: int, seed: int = 0) -> np.ndarray:
    """(count, size, size, 3) stack of toy normal images."""
    check_positive("count", count)
    images = [
        normal_texture(size, size, np.random.SeedSequence([seed, i]))
        for i in range(count)
    ]
    return np.stack(images)


@dataclass
class ToyTestSet:
    """Held-out toy split with every ground-truth layer kept around."""

    images: list       # (H, W, 3) float32 test inputs
    labels: np.ndarray  # 0 normal / 1 anomalous
    masks: list        # (H, W) binary ground truth (zeros for normals)
    normals: list      # clean appearance behind each image
    anomalies: list    # anomaly appearance layer (zeros for normals)

    def __len__(self) -> int:
        return len(self.images)


def make_toy_test_set(n_normal: int, n_anomalous: int, size: int, seed: int = 0, *,
                      pool: TexturePool | None = None) -> ToyTestSet:
    """Fresh toy normals plus fully opaque synthetic defects on fresh normals."""
    pool = pool if pool is not None else TexturePool()
    images, labels, masks, normals, anomalies = [], [], [], [], []
    for i in range(n_normal):
        base = normal_texture(size, size, np.random.SeedSequence([seed, 1, i]))
        images.append(base)
        labels.append(0)
        masks.append(np.zeros((size, size), dtype=np.float32))
        normals.append(base)
        anomalies.append(np.zeros_like(base))
    for i in range(n_anomalous):
        rng = _rng(np.random.SeedSequence([seed, 2, i]))
        base = normal_texture(size, size, rng)
        _, _, mask = _random_mask(size, size, rng, octaves=2, base_cells=4, max_area=0.45)
        anomaly = make_anomaly_source(base, pool, rng)
        images.append(compose(base, anomaly, mask, 1.0).astype(np.float32))
        labels.append(1)
        masks.append(mask)
        normals.append(base)
        anomalies.append(anomaly)
    return ToyTestSet(images=images, labels=np.asarray(labels), masks=masks,
                      normals=normals, anomalies=anomalies)
