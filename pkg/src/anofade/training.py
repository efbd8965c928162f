"""Training loop: batch synthesis, forward pass, loss, AdamW update,
checkpointing and a CSV loss log.

Reference mode (``num_threads=1``) is bitwise deterministic for a given seed:
model init consumes the torch RNG exactly once, and all batch synthesis is a
pure function of (seed, epoch, step), so an interrupted run resumed from a
checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import make_schedule
from .losses import combined_loss
from .model import (
    DenoiserModel,
    ModelConfig,
    build_input,
    load_checkpoint,
    positional_encoding,
    save_checkpoint,
)
from .synthesis import TexturePool, make_training_batch
from .validation import check_choice, check_positive

__all__ = ["TrainConfig", "TrainResult", "adamw_step", "train"]


@dataclass
class TrainConfig:
    """Hyperparameters; defaults are the desk-scale preset.

    ``full_scale_preset`` switches to the full-scale regime (1500 epochs, batch 8,
    lr 1e-5 dropped x0.1 after epoch 800, 224x224 inputs, 20 linear steps).
    """

    epochs: int = 200
    batch_size: int = 8
    lr: float = 4e-4
    lr_drop_epoch: int = 150
    lr_drop_factor: float = 0.1
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    steps: int = 20
    schedule_shape: str = "linear"
    image_size: int = 32
    seed: int = 0

    base_width: int = 24
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 2
    time_dim: int = 64
    pe_channels: int = 4
    norm_groups: int = 4

    perlin_octaves: int = 2
    perlin_cells: int = 4
    max_mask_area: float = 0.5
    texture_dir: str | None = None

    num_threads: int = 1  # 1 = deterministic reference mode, 0 = leave as-is
    checkpoint_every: int = 0  # 0 = final checkpoint only
    out_dir: str | None = None

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr", "steps", "image_size", "base_width"):
            check_positive(name, getattr(self, name))
        if not (0 < self.lr_drop_epoch < self.epochs):
            raise ValueError(
                f"lr_drop_epoch must lie in (0, epochs), got {self.lr_drop_epoch}"
            )
        check_choice("schedule_shape", self.schedule_shape, ("linear", "quadratic", "root"))

    @classmethod
    def desk_preset(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def full_scale_preset(cls, **overrides) -> "TrainConfig":
        base = dict(
            epochs=1500, batch_size=8, lr=1e-5, lr_drop_epoch=800,
            image_size=224, base_width=64, num_threads=0,
        )
        base.update(overrides)
        return cls(**base)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            in_channels=3,
            pe_channels=self.pe_channels,
            base_width=self.base_width,
            channel_mults=tuple(self.channel_mults),
            blocks_per_level=self.blocks_per_level,
            time_dim=self.time_dim,
            norm_groups=self.norm_groups,
        )

    def learning_rate(self, epoch: int) -> float:
        """LR in effect at 1-based ``epoch``: dropped after ``lr_drop_epoch``."""
        return self.lr if epoch <= self.lr_drop_epoch else self.lr * self.lr_drop_factor


def adamw_step(params, grads, state: dict, lr: float, weight_decay: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One decoupled-weight-decay adaptive-moment update, in place.

    ``state`` carries the step counter and per-parameter first/second moment
    buffers; pass ``{}`` on the first call. Decay scales the parameters by
    (1 - lr * weight_decay) independently of the gradient-driven update.
    """
    if not state:
        state["step"] = 0
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    state["step"] += 1
    step = state["step"]
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step

    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise RuntimeError("non-finite gradient encountered during update")
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


@dataclass
class TrainResult:
    model: DenoiserModel
    history: list = field(default_factory=list)
    checkpoint_path: Path | None = None
    log_path: Path | None = None


def _batch_tensors(samples, pe: torch.Tensor):
    x_t = torch.from_numpy(np.stack([s.image_t for s in samples])).permute(0, 3, 1, 2)
    gt_normal = torch.from_numpy(np.stack([s.gt_normal for s in samples])).permute(0, 3, 1, 2)
    gt_anomaly = torch.from_numpy(np.stack([s.gt_anomaly for s in samples])).permute(0, 3, 1, 2)
    gt_mask = torch.from_numpy(np.stack([s.gt_mask for s in samples]))[:, None]
    prev_mask = torch.from_numpy(np.stack([s.prev_mask for s in samples]))[:, None]
    t = np.asarray([s.t for s in samples])
    stacked = build_input(x_t.contiguous(), prev_mask, pe)
    return stacked, x_t, gt_mask, gt_anomaly, gt_normal, t


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    if n < batch_size:
        yield order
        return
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def train(images, config: TrainConfig, *, resume_from=None) -> TrainResult:
    """Train a denoiser on a collection of normal (H, W, C) images in [-1, 1].

    Writes ``training_log.csv`` and checkpoints into ``config.out_dir`` when
    set. ``resume_from`` continues a run from one of its own checkpoints and,
    in reference mode, reproduces the uninterrupted run bit for bit.
    """
    images = [np.asarray(img, dtype=np.float32) for img in images]
    if not images:
        raise ValueError("training dataset is empty")
    for img in images:
        if img.shape[0] != config.image_size or img.shape[1] != config.image_size:
            raise ValueError(
                f"expected {config.image_size}x{config.image_size} images, "
                f"got {img.shape[:2]}"
            )

    if config.num_threads > 0:
        torch.set_num_threads(config.num_threads)

    schedule = make_schedule(config.schedule_shape, config.steps)
    pool = TexturePool(config.texture_dir)
    pe = torch.from_numpy(
        positional_encoding(config.image_size, config.image_size, config.pe_channels)
    )

    torch.manual_seed(config.seed)
    model = DenoiserModel(config.model_config())
    model.train()
    params = list(model.parameters())
    opt_state: dict = {}
    start_epoch = 1

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        stored = dict(payload["model_config"])
        stored["channel_mults"] = tuple(stored["channel_mults"])
        if ModelConfig(**stored) != model.config:
            raise ValueError("checkpoint architecture does not match the train config")
        model.load_state_dict(payload["state_dict"], strict=True)
        if payload.get("optimizer_state"):
            opt = payload["optimizer_state"]
            opt_state = {"step": opt["step"], "m": list(opt["m"]), "v": list(opt["v"])}
        start_epoch = int(payload["epoch"]) + 1

    out_dir = Path(config.out_dir) if config.out_dir else None
    log_path = None
    log_file = log_writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "training_log.csv"
        log_file = open(log_path, "a" if resume_from is not None else "w", newline="")
        log_writer = csv.writer(log_file)
        if resume_from is None:
            log_writer.writerow(
                ["epoch", "lr", "loss_normal", "loss_mask", "loss_anomaly",
                 "loss_consistency", "loss_total"]
            )

    history = []
    checkpoint_path = None
    try:
        for epoch in range(start_epoch, config.epochs + 1):
            lr = config.learning_rate(epoch)
            shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
            sums = np.zeros(5)
            n_batches = 0
            for step, idx in enumerate(_epoch_batches(len(images), config.batch_size,
                                                      shuffle_rng)):
                samples = make_training_batch(
                    [images[i] for i in idx], schedule,
                    np.random.SeedSequence([config.seed, epoch, step]),
                    pool=pool, octaves=config.perlin_octaves,
                    base_cells=config.perlin_cells,
                    max_mask_area=config.max_mask_area,
                )
                stacked, x_t, gt_mask, gt_anomaly, gt_normal, t = _batch_tensors(samples, pe)

                predictions = model(stacked, torch.as_tensor(t, dtype=torch.long))
                total, breakdown = combined_loss(
                    predictions, (gt_mask, gt_anomaly, gt_normal), x_t, schedule, t
                )
                if not torch.isfinite(total):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} step {step}: {breakdown}"
                    )
                model.zero_grad(set_to_none=True)
                total.backward()
                grads = [p.grad for p in params]
                adamw_step(params, grads, opt_state, lr, config.weight_decay,
                           config.adam_beta1, config.adam_beta2, config.adam_eps)

                sums += [breakdown.normal, breakdown.mask, breakdown.anomaly,
                         breakdown.consistency, breakdown.total]
                n_batches += 1

            means = sums / max(n_batches, 1)
            row = {
                "epoch": epoch, "lr": lr,
                "loss_normal": float(means[0]), "loss_mask": float(means[1]),
                "loss_anomaly": float(means[2]), "loss_consistency": float(means[3]),
                "loss_total": float(means[4]),
            }
            history.append(row)
            if log_writer is not None:
                log_writer.writerow([row[k] for k in
                                     ("epoch", "lr", "loss_normal", "loss_mask",
                                      "loss_anomaly", "loss_consistency", "loss_total")])
                log_file.flush()

            if out_dir is not None:
                periodic = config.checkpoint_every and epoch % config.checkpoint_every == 0
                if periodic or epoch == config.epochs:
                    name = ("checkpoint_final.pt" if epoch == config.epochs
                            else f"checkpoint_epoch{epoch:05d}.pt")
                    checkpoint_path = out_dir / name
                    save_checkpoint(
                        checkpoint_path, model,
                        optimizer_state={"step": opt_state.get("step", 0),
                                         "m": opt_state.get("m"),
                                         "v": opt_state.get("v")},
                        epoch=epoch,
                        extra={"train_config": dataclasses.asdict(config)},
                    )
    finally:
        if log_file is not None:
            log_file.close()

    model.eval()
    return TrainResult(model=model, history=history,
                       checkpoint_path=checkpoint_path, log_path=log_path)
