"""Asymmetric encoder/decoder around the GAN prior.

The encoder runs a stack of feature blocks per scale followed by a stride-2
downsample, producing one skip feature per resolution plus the latent code
Z from the coarsest scale. The decoder walks back up with skip connections,
emitting the per-scale features consumed by the generator's noise branches
and a small RGB reconstruction at every level for multi-scale L1
supervision. The encoder has one more block per scale than the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .equalized import EqualConv2d, EqualLinear
from .errors import ConfigError
from .mmrb import Mmrb, PlainResidualBlock
from .schedule import channel_schedule, resolution_ladder
from .tensorops import resize_tensor

__all__ = ["CodecConfig", "EncodedState", "Encoder", "Decoder", "restoration_loss"]


@dataclass
class CodecConfig:
    base_resolution: int = 64
    min_resolution: int = 4
    latent_dim: int = 64
    channels: dict[int, int] = field(default_factory=dict)
    mmrb_per_scale_encoder: int = 2
    mmrb_per_scale_decoder: int = 1
    use_mmrb: bool = True
    share_branch_kernels: bool = False
    per_block_latent: bool = False

    def __post_init__(self):
        if not self.channels:
            self.channels = channel_schedule(self.base_resolution, min_resolution=self.min_resolution)

    def validate(self) -> "CodecConfig":
        ladder = resolution_ladder(self.base_resolution, self.min_resolution)
        if self.min_resolution < 4:
            raise ConfigError("min_resolution below 4 is not supported")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.mmrb_per_scale_decoder < 1:
            raise ConfigError("decoder needs at least one block per scale")
        if self.mmrb_per_scale_encoder != self.mmrb_per_scale_decoder + 1:
            raise ConfigError(
                "encoder must have exactly one more block per scale than the decoder "
                f"(got {self.mmrb_per_scale_encoder} vs {self.mmrb_per_scale_decoder})"
            )
        for r in ladder:
            if r not in self.channels:
                raise ConfigError(f"channel schedule missing resolution {r}")
            if self.channels[r] % 2:
                raise ConfigError(f"channels at {r} must be even, got {self.channels[r]}")
        return self

    @property
    def ladder(self) -> list[int]:
        return resolution_ladder(self.base_resolution, self.min_resolution)

    def noise_resolutions(self) -> list[int]:
        return [r for r in self.ladder if r >= 8]


@dataclass
class EncodedState:
    """Latent code plus one skip feature per scale, keyed by resolution."""

    latent: torch.Tensor
    skips: dict[int, torch.Tensor]


def _make_blocks(config: CodecConfig, channels: int, count: int) -> nn.Sequential:
    if config.use_mmrb:
        blocks = [Mmrb(channels, config.share_branch_kernels) for _ in range(count)]
    else:
        blocks = [PlainResidualBlock(channels) for _ in range(count)]
    return nn.Sequential(*blocks)


class Encoder(nn.Module):
    """LQ image -> latent Z and per-scale skip features."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config.validate()
        ch = config.channels
        ladder = config.ladder
        self.from_rgb = EqualConv2d(3, ch[ladder[-1]], 3, padding=1)
        self.stacks = nn.ModuleDict()
        self.downs = nn.ModuleDict()
        for r in reversed(ladder):
            self.stacks[str(r)] = _make_blocks(config, ch[r], config.mmrb_per_scale_encoder)
            if r > config.min_resolution:
                self.downs[str(r)] = EqualConv2d(ch[r], ch[r // 2], 3, stride=2, padding=1)
        latents = len(config.noise_resolutions()) if config.per_block_latent else 1
        self.num_latents = latents
        self.latent_head = EqualLinear(
            ch[config.min_resolution] * config.min_resolution**2,
            config.latent_dim * latents,
        )

    def forward(self, x: torch.Tensor) -> EncodedState:
        base = self.config.base_resolution
        if x.dim() != 4 or x.shape[1] != 3:
            raise ConfigError(f"expected (N, 3, {base}, {base}) input, got {tuple(x.shape)}")
        if x.shape[-2:] != (base, base):
            raise ConfigError(
                f"encoder built for {base}x{base} inputs, got {x.shape[-2]}x{x.shape[-1]}"
            )
        feat = F.leaky_relu(self.from_rgb(x), 0.2)
        skips: dict[int, torch.Tensor] = {}
        for r in reversed(self.config.ladder):
            feat = self.stacks[str(r)](feat)
            skips[r] = feat
            if r > self.config.min_resolution:
                feat = F.leaky_relu(self.downs[str(r)](feat), 0.2)
        z = self.latent_head(skips[self.config.min_resolution].flatten(1))
        if self.config.per_block_latent:
            z = z.reshape(z.shape[0], self.num_latents, self.config.latent_dim)
        return EncodedState(latent=z, skips=skips)


class Decoder(nn.Module):
    """Skip features -> noise-branch features and per-scale RGB reconstructions."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config.validate()
        ch = config.channels
        self.bottom = _make_blocks(config, ch[config.min_resolution], config.mmrb_per_scale_decoder)
        self.ups = nn.ModuleDict()
        self.stacks = nn.ModuleDict()
        self.recon_heads = nn.ModuleDict()
        for r in config.noise_resolutions():
            self.ups[str(r)] = EqualConv2d(ch[r // 2], ch[r], 3, padding=1)
            self.stacks[str(r)] = _make_blocks(config, ch[r], config.mmrb_per_scale_decoder)
            self.recon_heads[str(r)] = EqualConv2d(ch[r], 3, 1)

    def noise_feature_shapes(self) -> dict[int, int]:
        """Channels emitted to the generator's noise branch at each resolution."""
        return {r: self.config.channels[r] for r in self.config.noise_resolutions()}

    def forward(self, state: EncodedState) -> tuple[dict[int, torch.Tensor], dict[int, torch.Tensor]]:
        cfg = self.config
        expected = set(cfg.ladder)
        if set(state.skips) != expected:
            raise ConfigError(
                f"skip resolutions {sorted(state.skips)} do not match codec ladder {sorted(expected)}"
            )
        feat = self.bottom(state.skips[cfg.min_resolution])
        noise: dict[int, torch.Tensor] = {}
        recons: dict[int, torch.Tensor] = {}
        for r in cfg.noise_resolutions():
            feat = F.interpolate(feat, scale_factor=2, mode="nearest")
            feat = F.leaky_relu(self.ups[str(r)](feat), 0.2)
            skip = state.skips[r]
            if skip.shape[1] != feat.shape[1]:
                raise ConfigError(
                    f"skip at {r} has {skip.shape[1]} channels, decoder expects {feat.shape[1]}"
                )
            feat = feat + skip
            feat = self.stacks[str(r)](feat)
            noise[r] = feat
            recons[r] = self.recon_heads[str(r)](feat)
        return noise, recons


def restoration_loss(
    recons: dict[int, torch.Tensor], gt: torch.Tensor, weight: float = 1.0
) -> torch.Tensor:
    """Sum over scales of weight * mean |recon_r - downsample(gt, r)|.

    gt is (N, 3, base, base); recons maps resolution -> (N, 3, r, r) and must
    form a contiguous doubling ladder ending at the ground-truth size.
    """
    if gt.dim() != 4 or gt.shape[1] != 3:
        raise ConfigError(f"gt must be (N, 3, H, W), got {tuple(gt.shape)}")
    base = gt.shape[-1]
    if gt.shape[-2] != base:
        raise ConfigError("gt must be square")
    scales = sorted(recons)
    if not scales:
        raise ConfigError("no reconstruction scales given")
    expected = []
    r = base
    while len(expected) < len(scales):
        expected.append(r)
        r //= 2
    if scales != sorted(expected):
        raise ConfigError(
            f"reconstruction scales {scales} do not form a ladder ending at {base}"
        )
    total = gt.new_zeros(())
    for r in scales:
        recon = recons[r]
        if recon.shape[-2:] != (r, r) or recon.shape[1] != 3:
            raise ConfigError(f"reconstruction at {r} has shape {tuple(recon.shape)}")
        target = gt if r == base else resize_tensor(gt.detach(), r, r, "bicubic")
        total = total + weight * (recon - target).abs().mean()
    return total
