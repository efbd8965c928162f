"""Scikit-learn style front end.

``TransparencyDiffusionDetector`` wraps the whole pipeline behind the usual
estimator surface: ``fit`` trains the denoiser on normal images only,
``score_samples`` returns image-level anomaly scores, ``transform`` returns
per-pixel anomaly maps and ``predict`` thresholds the scores into 0/1 labels.
Hyperparameters follow sklearn conventions (constructor args stored verbatim,
``get_params``/``set_params`` inherited from ``BaseEstimator``).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import preprocess
from .diffusion import make_schedule
from .inference import scaled_kernel_size, score_image
from .model import load_denoiser, save_checkpoint
from .training import TrainConfig, train
from .validation import as_image_batch

__all__ = ["TransparencyDiffusionDetector"]


class TransparencyDiffusionDetector(BaseEstimator):
    """Anomaly detector driven by iterative transparency removal.

    Defaults are the desk-scale preset (32x32 inputs, 200 epochs), which
    trains in minutes on a CPU; pass the full-scale settings (image_size=224,
    resize_size=256, epochs=1500, lr=1e-5, lr_drop_epoch=800) for real
    inspection datasets.

    Parameters mirror :class:`anofade.training.TrainConfig` plus the fusion
    settings used at prediction time. ``kernel_size=None`` picks a mean-filter
    size proportional to ``image_size`` (7 at 224). ``score_threshold`` only
    affects ``predict``; scores themselves live in [0, 1].
    """

    def __init__(self, image_size=32, resize_size=36, steps=20, schedule="linear",
                 epochs=200, batch_size=8, lr=4e-4, lr_drop_epoch=150,
                 weight_decay=0.01, base_width=24, blocks_per_level=2,
                 fuse_weight=0.95, kernel_size=None, mask_threshold=0.5,
                 score_threshold=0.5, texture_dir=None, seed=0, num_threads=1):
        self.image_size = image_size
        self.resize_size = resize_size
        self.steps = steps
        self.schedule = schedule
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_drop_epoch = lr_drop_epoch
        self.weight_decay = weight_decay
        self.base_width = base_width
        self.blocks_per_level = blocks_per_level
        self.fuse_weight = fuse_weight
        self.kernel_size = kernel_size
        self.mask_threshold = mask_threshold
        self.score_threshold = score_threshold
        self.texture_dir = texture_dir
        self.seed = seed
        self.num_threads = num_threads

    def _train_config(self, out_dir=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            lr_drop_epoch=self.lr_drop_epoch, weight_decay=self.weight_decay,
            steps=self.steps, schedule_shape=self.schedule,
            image_size=self.image_size, seed=self.seed,
            base_width=self.base_width, blocks_per_level=self.blocks_per_level,
            texture_dir=self.texture_dir, num_threads=self.num_threads,
            out_dir=out_dir,
        )

    def _prepare(self, X) -> list:
        batch = as_image_batch(X)
        return [
            preprocess(img, resize_to=self.resize_size, crop_to=self.image_size)
            for img in batch
        ]

    def fit(self, X, y=None, out_dir=None):
        """Train on normal images only.

        ``X`` is a sequence or (N, H, W, C) stack; uint8 (or float 8-bit
        scale) images are rescaled from [0, 255], other floats are taken as
        already in [-1, 1]. ``y`` is ignored (present for pipeline
        compatibility).
        """
        images = self._prepare(X)
        config = self._train_config(out_dir)
        result = train(images, config)
        self.model_ = result.model
        self.schedule_ = make_schedule(self.schedule, self.steps)
        self.history_ = result.history
        self.checkpoint_path_ = result.checkpoint_path
        return self

    def _traces(self, X):
        check_is_fitted(self, "model_")
        kernel = (self.kernel_size if self.kernel_size is not None
                  else scaled_kernel_size(self.image_size))
        return [
            score_image(self.model_, img, self.schedule_,
                        fuse_weight=self.fuse_weight, kernel_size=kernel,
                        mask_threshold=self.mask_threshold)
            for img in self._prepare(X)
        ]

    def transform(self, X) -> np.ndarray:
        """Per-pixel anomaly maps, shape (N, image_size, image_size)."""
        return np.stack([t.mask_final for t in self._traces(X)])

    def score_samples(self, X) -> np.ndarray:
        """Image-level anomaly scores (higher means more anomalous)."""
        return np.asarray([t.score for t in self._traces(X)], dtype=np.float64)

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X) - self.score_threshold

    def predict(self, X) -> np.ndarray:
        """Binary image labels: 1 where the score reaches ``score_threshold``."""
        return (self.score_samples(X) >= self.score_threshold).astype(int)

    def save(self, path) -> None:
        """Persist the fitted denoiser as a standalone checkpoint."""
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_)

    def load(self, path):
        """Load a previously saved denoiser into this estimator."""
        self.model_, _ = load_denoiser(path)
        self.schedule_ = make_schedule(self.schedule, self.steps)
        self.history_ = []
        self.checkpoint_path_ = path
        return self
