"""Image I/O, preprocessing and the on-disk dataset convention.

Datasets follow the industrial-inspection directory layout:

    <root>/<category>/train/good/*.png            normal training images
    <root>/<category>/test/<defect_type>/*.png    test images ('good' = normal)
    <root>/<category>/ground_truth/<defect_type>/*_mask.png   binary masks

Every anomalous test image must have a mask; normal test images have none.
Images are decoded to RGB, resized, center-cropped and linearly scaled to
[-1, 1]. Predicted anomaly maps are written as 16-bit grayscale PNG to keep
score resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "IMAGE_EXTENSIONS",
    "default_resize_for",
    "load_image",
    "load_mask",
    "load_texture",
    "preprocess",
    "save_image",
    "save_mask16",
    "load_mask16",
    "DatasetLayout",
    "load_dataset",
]

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

DEFAULT_RESIZE = 256
DEFAULT_CROP = 224


def default_resize_for(crop: int) -> int:
    """Resize target with the standard 256:224 margin around a crop size."""
    return max(crop + 1, round(crop * DEFAULT_RESIZE / DEFAULT_CROP))


def load_image(path) -> np.ndarray:
    """Decode any supported image to an (H, W, 3) uint8 RGB array."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def load_mask(path) -> np.ndarray:
    """Decode a ground-truth mask to a binary (H, W) float32 array."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 0).astype(np.float32)


def _ensure_rgb(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    if image.ndim != 3:
        raise ValueError(f"expected a 2-d or 3-d image, got shape {image.shape}")
    if image.shape[-1] == 4:
        image = image[..., :3]
    if image.shape[-1] != 3:
        raise ValueError(f"expected 1, 3 or 4 channels, got {image.shape[-1]}")
    return image


def _resize_float(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an (H, W, C) float32 array to (height, width)."""
    height, width = size
    planes = [
        np.asarray(
            Image.fromarray(image[..., c], mode="F").resize(
                (width, height), resample=Image.BILINEAR
            )
        )
        for c in range(image.shape[-1])
    ]
    return np.stack(planes, axis=-1)


def preprocess(image: np.ndarray, resize_to: int = DEFAULT_RESIZE,
               crop_to: int = DEFAULT_CROP) -> np.ndarray:
    """Resize, center-crop and scale an image to a [-1, 1] float32 tensor.

    uint8 inputs are mapped from [0, 255]; float inputs are passed through
    when already in [-1, 1] and rescaled when they clearly carry 8-bit values.
    An image already at the crop size skips resampling entirely, so
    preprocessing is idempotent at the target size.
    """
    if resize_to < crop_to:
        raise ValueError(f"resize target {resize_to} is smaller than crop {crop_to}")
    image = _ensure_rgb(np.asarray(image))
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 127.5 - 1.0
    else:
        image = image.astype(np.float32)
        if float(image.max()) > 1.5:  # float array still on the 8-bit scale
            image = image / 127.5 - 1.0

    if image.shape[:2] == (crop_to, crop_to):
        return image
    image = _resize_float(image, (resize_to, resize_to))
    off = (resize_to - crop_to) // 2
    return np.ascontiguousarray(image[off : off + crop_to, off : off + crop_to])


def load_texture(path, height: int, width: int) -> np.ndarray:
    """Decode and resize a texture image to (height, width, 3) in [-1, 1]."""
    image = load_image(path).astype(np.float32) / 127.5 - 1.0
    return _resize_float(image, (height, width)).astype(np.float32)


def save_image(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [-1, 1] as 8-bit PNG."""
    arr = np.clip((np.asarray(image) + 1.0) * 127.5, 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def save_mask16(path, mask: np.ndarray) -> None:
    """Write an (H, W) map in [0, 1] as 16-bit grayscale PNG."""
    arr = np.round(np.clip(np.asarray(mask), 0.0, 1.0) * 65535.0).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def load_mask16(path) -> np.ndarray:
    """Read a 16-bit grayscale PNG back to an (H, W) float32 map in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float64)
    return (arr / 65535.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Dataset layout
# ---------------------------------------------------------------------------


@dataclass
class DatasetLayout:
    root: Path
    category: str
    train_images: list
    test_images: list  # (path, defect_type) pairs, 'good' meaning normal
    masks: dict  # test path -> mask path (None for normal images)

    @property
    def anomalous_test_images(self):
        return [(p, d) for p, d in self.test_images if d != "good"]


def _images_in(directory: Path) -> list:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def _find_mask(gt_dir: Path, defect: str, image_path: Path):
    candidates_dir = gt_dir / defect
    if not candidates_dir.is_dir():
        return None
    stem = image_path.stem
    for name in (f"{stem}_mask", stem):
        for ext in IMAGE_EXTENSIONS:
            candidate = candidates_dir / f"{name}{ext}"
            if candidate.exists():
                return candidate
    return None


def load_dataset(root, category: str) -> DatasetLayout:
    """Validate and enumerate one category in lexicographic order.

    Raises ``ValueError`` naming every anomalous test image that lacks a
    ground-truth mask, and when the training split is empty.
    """
    root = Path(root)
    base = root / category
    if not base.is_dir():
        raise ValueError(f"dataset category directory not found: {base}")

    train_dir = base / "train" / "good"
    train_images = _images_in(train_dir) if train_dir.is_dir() else []
    if not train_images:
        raise ValueError(f"no training images under {train_dir}")

    test_dir = base / "test"
    gt_dir = base / "ground_truth"
    test_images = []
    masks = {}
    missing = []
    if test_dir.is_dir():
        for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            defect = defect_dir.name
            for image_path in _images_in(defect_dir):
                test_images.append((image_path, defect))
                if defect == "good":
                    masks[image_path] = None
                else:
                    mask_path = _find_mask(gt_dir, defect, image_path)
                    if mask_path is None:
                        missing.append(str(image_path.relative_to(root)))
                    masks[image_path] = mask_path
    if missing:
        raise ValueError(
            "anomalous test images without ground-truth masks: " + ", ".join(missing)
        )
    return DatasetLayout(root=root, category=category, train_images=train_images,
                         test_images=test_images, masks=masks)
