"""anofade: surface anomaly detection by iterative transparency removal.

Anomalies are modelled as a translucent layer blended over the normal
appearance; a learned multi-head denoiser predicts the layer decomposition at
every step of a fixed opacity schedule, erasing the anomaly while localizing
it. The package covers synthetic anomaly generation, training, the reverse
inference engine, detection/localization metrics, a CLI and a scikit-learn
style estimator.
"""

from .diffusion import (
    SCHEDULE_SHAPES,
    TransparencySchedule,
    compose,
    forward_sample,
    make_schedule,
    reverse_step,
)
from .estimator import TransparencyDiffusionDetector
from .evaluation import EvalRecord, aupro, auroc, pro_curve
from .inference import InferenceTrace, OracleDenoiser, binarize, fuse_masks, run_reverse, score_image
from .losses import (
    LossBreakdown,
    anomaly_loss,
    combined_loss,
    consistency_loss,
    focal_loss,
    mask_loss,
    normal_loss,
    ssim_loss,
)
from .model import (
    DenoiserModel,
    ModelConfig,
    build_input,
    load_checkpoint,
    load_denoiser,
    positional_encoding,
    predict,
    save_checkpoint,
    timestep_embedding,
)
from .synthesis import (
    SyntheticSample,
    TexturePool,
    generate_mask,
    make_anomaly_source,
    make_texture_dataset,
    make_toy_test_set,
    make_training_batch,
    normal_texture,
    perlin_noise,
    simulate_prev_mask,
)
from .training import TrainConfig, TrainResult, adamw_step, train

__version__ = "0.1.0"

__all__ = [
    "SCHEDULE_SHAPES",
    "TransparencySchedule",
    "compose",
    "forward_sample",
    "make_schedule",
    "reverse_step",
    "TransparencyDiffusionDetector",
    "EvalRecord",
    "auroc",
    "aupro",
    "pro_curve",
    "InferenceTrace",
    "OracleDenoiser",
    "binarize",
    "fuse_masks",
    "run_reverse",
    "score_image",
    "LossBreakdown",
    "ssim_loss",
    "normal_loss",
    "focal_loss",
    "mask_loss",
    "anomaly_loss",
    "consistency_loss",
    "combined_loss",
    "DenoiserModel",
    "ModelConfig",
    "build_input",
    "positional_encoding",
    "timestep_embedding",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "load_denoiser",
    "SyntheticSample",
    "TexturePool",
    "perlin_noise",
    "generate_mask",
    "simulate_prev_mask",
    "make_anomaly_source",
    "make_training_batch",
    "normal_texture",
    "make_texture_dataset",
    "make_toy_test_set",
    "TrainConfig",
    "TrainResult",
    "adamw_step",
    "train",
    "__version__",
]
