"""Multi-head denoiser: a residual U-Net that, given the current image, the
previous mask estimate, a positional encoding and the timestep, predicts the
anomaly mask, the anomaly appearance and the normal appearance.

The mask head ends in BatchNorm -> SiLU -> conv and a sigmoid so it emits
per-pixel probabilities; the two appearance heads are single convolutions with
unconstrained output. Timestep conditioning is a sinusoidal embedding added to
the features inside every residual block after a learned projection.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "ModelConfig",
    "positional_encoding",
    "timestep_embedding",
    "build_input",
    "DenoiserModel",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "load_denoiser",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    pe_channels: int = 4
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 2
    time_dim: int = 64
    norm_groups: int = 4

    @property
    def stacked_channels(self) -> int:
        return self.in_channels + 1 + self.pe_channels

    @property
    def depth(self) -> int:
        return len(self.channel_mults)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.depth - 1)


def positional_encoding(height: int, width: int, channels: int = 4) -> np.ndarray:
    """Deterministic 2-d sinusoidal position planes, shape (channels, H, W).

    Half the planes encode the vertical coordinate, half the horizontal one,
    as sin/cos pairs of increasing frequency over the normalized [0, 1] span.
    All values lie in [-1, 1].
    """
    if channels < 4 or channels % 4 != 0:
        raise ValueError(f"pe channels must be a positive multiple of 4, got {channels}")
    pairs = channels // 4
    planes = []
    for size, vertical in ((height, True), (width, False)):
        u = np.linspace(0.0, 1.0, size, dtype=np.float64)
        for k in range(pairs):
            phase = np.pi * (k + 1) * u
            for wave in (np.sin(phase), np.cos(phase)):
                plane = wave[:, None] if vertical else wave[None, :]
                planes.append(np.broadcast_to(plane, (height, width)))
    return np.stack(planes).astype(np.float32)


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim).

    Injective over small integer ranges for dim >= 2 (the base frequency has
    an irrational period in integer steps).
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be an even integer >= 2, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -np.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1)
    )
    angles = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


def build_input(x_t: torch.Tensor, prev_mask: torch.Tensor, pe: torch.Tensor) -> torch.Tensor:
    """Channel-stack [image | previous mask | positional encoding].

    ``x_t`` is (B, C, H, W); ``prev_mask`` is (B, H, W) or (B, 1, H, W); ``pe``
    is (P, H, W) or (B, P, H, W). Output has C + 1 + P channels.
    """
    if prev_mask.ndim == 3:
        prev_mask = prev_mask[:, None]
    if pe.ndim == 3:
        pe = pe[None].expand(x_t.shape[0], -1, -1, -1)
    if x_t.shape[-2:] != prev_mask.shape[-2:] or x_t.shape[-2:] != pe.shape[-2:]:
        raise ValueError(
            f"spatial dims differ: image {tuple(x_t.shape[-2:])}, "
            f"mask {tuple(prev_mask.shape[-2:])}, encoding {tuple(pe.shape[-2:])}"
        )
    return torch.cat([x_t, prev_mask.to(x_t.dtype), pe.to(x_t.dtype)], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        g_in = groups if c_in % groups == 0 else 1
        g_out = groups if c_out % groups == 0 else 1
        self.norm1 = nn.GroupNorm(g_in, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(g_out, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserModel(nn.Module):
    """Residual U-Net with mask / anomaly / normal prediction heads."""

    def __init__(self, config: ModelConfig | None = None, **overrides):
        super().__init__()
        if config is None:
            config = ModelConfig(**overrides)
        elif overrides:
            config = dataclasses.replace(config, **overrides)
        self.config = config

        widths = [config.base_width * m for m in config.channel_mults]
        time_dim, groups = config.time_dim, config.norm_groups

        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.stem = nn.Conv2d(config.stacked_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        c = widths[0]
        for width in widths:
            level = nn.ModuleList()
            for _ in range(config.blocks_per_level):
                level.append(ResidualBlock(c, width, time_dim, groups))
                c = width
            self.down_blocks.append(level)

        self.mid_block = ResidualBlock(c, c, time_dim, groups)

        self.up_blocks = nn.ModuleList()
        for i in reversed(range(config.depth - 1)):
            level = nn.ModuleList()
            for j in range(config.blocks_per_level):
                c_in = c + widths[i] if j == 0 else c
                level.append(ResidualBlock(c_in, widths[i], time_dim, groups))
                c = widths[i]
            self.up_blocks.append(level)

        self.mask_head = nn.Sequential(
            nn.BatchNorm2d(c), nn.SiLU(), nn.Conv2d(c, 1, 3, padding=1)
        )
        self.anomaly_head = nn.Conv2d(c, config.in_channels, 3, padding=1)
        self.normal_head = nn.Conv2d(c, config.in_channels, 3, padding=1)

    @property
    def pe_channels(self) -> int:
        return self.config.pe_channels

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, stacked: torch.Tensor, t: torch.Tensor):
        if stacked.shape[1] != self.config.stacked_channels:
            raise ValueError(
                f"expected {self.config.stacked_channels} input channels, "
                f"got {stacked.shape[1]}"
            )
        div = self.config.spatial_divisor
        if stacked.shape[-2] % div or stacked.shape[-1] % div:
            raise ValueError(
                f"spatial dims {tuple(stacked.shape[-2:])} must be divisible by {div}"
            )
        temb = self.time_mlp(timestep_embedding(t.reshape(-1).to(stacked.device),
                                                self.config.time_dim,
                                                dtype=stacked.dtype))

        h = self.stem(stacked)
        skips = []
        for i, level in enumerate(self.down_blocks):
            for block in level:
                h = block(h, temb)
            skips.append(h)
            if i < len(self.down_blocks) - 1:
                h = F.avg_pool2d(h, 2)

        h = self.mid_block(h, temb)

        for i, level in enumerate(self.up_blocks):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = torch.cat([h, skips[-(i + 2)]], dim=1)
            for block in level:
                h = block(h, temb)

        mask = torch.sigmoid(self.mask_head(h))
        return mask, self.anomaly_head(h), self.normal_head(h)


def predict(model: DenoiserModel, stacked: torch.Tensor, t) -> tuple:
    """Deterministic eval-mode forward pass returning (mask, anomaly, normal)."""
    if not torch.is_tensor(t):
        t = torch.as_tensor([int(t)] * stacked.shape[0], dtype=torch.long)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(stacked, t)
    finally:
        model.train(was_training)
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: DenoiserModel, *, optimizer_state=None,
                    epoch: int | None = None, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": dataclasses.asdict(model.config),
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer_state,
        "epoch": epoch,
    }
    if extra:
        payload["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ValueError(f"{path} is not a model checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint format {payload['format_version']} is not supported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    for key in ("model_config", "state_dict"):
        if key not in payload:
            raise ValueError(f"checkpoint {path} is missing field {key!r}")
    return payload


def load_denoiser(path, expected_config: ModelConfig | None = None):
    """Rebuild the model stored at ``path``; returns (model, payload).

    If ``expected_config`` is given it must match the stored architecture
    exactly; loading silently into a different architecture is refused.
    """
    payload = load_checkpoint(path)
    stored = payload["model_config"]
    stored["channel_mults"] = tuple(stored["channel_mults"])
    config = ModelConfig(**stored)
    if expected_config is not None and expected_config != config:
        raise ValueError(
            f"checkpoint architecture {config} does not match expected "
            f"{expected_config}"
        )
    model = DenoiserModel(config)
    model.load_state_dict(payload["state_dict"], strict=True)
    model.eval()
    return model, payload
