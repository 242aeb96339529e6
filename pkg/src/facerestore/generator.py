"""StyleGAN2-style prior network with concatenation-based noise fusion.

A mapping MLP turns the encoder's latent Z into the style vector W, a
learned 4x4 constant seeds synthesis, and a ladder of style blocks doubles
the resolution until the output size while fusing per-scale codec features
into each block by channel concatenation followed by a learned 1x1 merge.
Per-resolution RGB projections are summed skip-generator style. There is no
internal randomness: all "noise" inputs come from the codec.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .equalized import EqualConv2d, EqualLinear
from .errors import ConfigError
from .schedule import channel_schedule, resolution_ladder

__all__ = [
    "GeneratorConfig",
    "PixelNorm",
    "MappingNetwork",
    "modulate_demodulate",
    "ModulatedConv2d",
    "StyleBlock",
    "PriorGenerator",
]

DEMOD_EPS = 1e-8


@dataclass
class GeneratorConfig:
    base_resolution: int = 64
    latent_dim: int = 64
    mapping_layers: int = 4
    channels: dict[int, int] = field(default_factory=dict)
    noise_channels: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.channels:
            self.channels = channel_schedule(self.base_resolution)
        if not self.noise_channels:
            self.noise_channels = {
                r: c for r, c in self.channels.items() if r >= 8
            }

    def validate(self) -> "GeneratorConfig":
        ladder = resolution_ladder(self.base_resolution, 4)
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be positive, got {self.latent_dim}")
        if self.mapping_layers < 1:
            raise ConfigError("mapping network needs at least one layer")
        for r in ladder:
            if r not in self.channels:
                raise ConfigError(f"channel schedule missing resolution {r}")
        for r in ladder:
            if r >= 8 and r not in self.noise_channels:
                raise ConfigError(f"noise schedule missing resolution {r}")
        return self

    @property
    def block_resolutions(self) -> list[int]:
        return [r for r in resolution_ladder(self.base_resolution, 4) if r >= 8]


class PixelNorm(nn.Module):
    """Normalize each latent vector to unit RMS; makes z scale-invariant."""

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return z * torch.rsqrt(torch.mean(z**2, dim=-1, keepdim=True) + 1e-8)


class MappingNetwork(nn.Module):
    """Z -> W mapping MLP; the input is RMS-normalized before the first layer."""

    def __init__(self, latent_dim: int, layers: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.norm = PixelNorm()
        self.layers = nn.ModuleList(
            EqualLinear(latent_dim, latent_dim) for _ in range(layers)
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.latent_dim:
            raise ConfigError(f"latent has dim {z.shape[-1]}, expected {self.latent_dim}")
        w = self.norm(z)
        for layer in self.layers:
            w = F.leaky_relu(layer(w), 0.2)
        return w


def modulate_demodulate(
    weight: torch.Tensor, style: torch.Tensor, demodulate: bool = True, eps: float = DEMOD_EPS
) -> torch.Tensor:
    """Scale conv weights per input channel by the style, then renormalize each
    output channel to unit weight norm.

    weight: (out, in, kh, kw); style: (batch, in). Returns (batch, out, in, kh, kw).
    """
    if style.shape[-1] != weight.shape[1]:
        raise ConfigError(
            f"style length {style.shape[-1]} != conv input channels {weight.shape[1]}"
        )
    if style.shape[-1] == 0:
        raise ConfigError("zero-length style")
    w = weight[None] * style[:, None, :, None, None]
    if demodulate:
        demod = torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4)) + eps)
        w = w * demod[:, :, None, None, None]
    return w


class ModulatedConv2d(nn.Module):
    """3x3/1x1 convolution whose weights are style-modulated per sample."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 latent_dim: int, demodulate: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.demodulate = demodulate
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size**2)
        self.weight = nn.Parameter(
            torch.randn(out_channels, in_channels, kernel_size, kernel_size)
        )
        self.affine = EqualLinear(latent_dim, in_channels, bias_init=1.0)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        batch, in_ch, height, width = x.shape
        if in_ch != self.in_channels:
            raise ConfigError(f"expected {self.in_channels} input channels, got {in_ch}")
        style = self.affine(w)
        weight = modulate_demodulate(self.weight * self.scale, style, self.demodulate)
        weight = weight.reshape(batch * self.out_channels, in_ch, self.kernel_size, self.kernel_size)
        out = F.conv2d(
            x.reshape(1, batch * in_ch, height, width),
            weight,
            padding=self.kernel_size // 2,
            groups=batch,
        )
        return out.reshape(batch, self.out_channels, height, width)


class StyleBlock(nn.Module):
    """One resolution-raising block: upsample, style-modulated conv, then
    concat fusion of the codec's noise features through a 1x1 merge."""

    def __init__(self, in_channels: int, out_channels: int, noise_channels: int, latent_dim: int):
        super().__init__()
        self.noise_channels = noise_channels
        self.conv = ModulatedConv2d(in_channels, out_channels, 3, latent_dim)
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.fuse = EqualConv2d(out_channels + noise_channels, out_channels, 1)

    def forward(self, y: torch.Tensor, w: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        y = F.interpolate(y, scale_factor=2, mode="nearest")
        y = F.leaky_relu(self.conv(y, w) + self.bias[None, :, None, None], 0.2)
        if noise.shape[-2:] != y.shape[-2:]:
            raise ConfigError(
                f"noise spatial size {tuple(noise.shape[-2:])} does not match block size {tuple(y.shape[-2:])}"
            )
        if noise.shape[1] != self.noise_channels:
            raise ConfigError(
                f"noise has {noise.shape[1]} channels, block expects {self.noise_channels}"
            )
        return F.leaky_relu(self.fuse(torch.cat([noise, y], dim=1)), 0.2)


class ToRgb(nn.Module):
    def __init__(self, in_channels: int, latent_dim: int):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, 3, 1, latent_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, y: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        return self.conv(y, w) + self.bias[None, :, None, None]


class PriorGenerator(nn.Module):
    """Coarse-to-fine synthesis network driven by W and per-scale codec features."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config.validate()
        ch = config.channels
        self.constant = nn.Parameter(torch.randn(ch[4], 4, 4))
        self.mapping = MappingNetwork(config.latent_dim, config.mapping_layers)
        self.blocks = nn.ModuleDict()
        self.to_rgb = nn.ModuleDict()
        for r in config.block_resolutions:
            self.blocks[str(r)] = StyleBlock(
                ch[r // 2], ch[r], config.noise_channels[r], config.latent_dim
            )
            self.to_rgb[str(r)] = ToRgb(ch[r], config.latent_dim)

    @property
    def num_blocks(self) -> int:
        return len(self.config.block_resolutions)

    def expected_noise_shapes(self) -> dict[int, int]:
        """Channels the noise branch must supply at each block resolution."""
        return {r: self.config.noise_channels[r] for r in self.config.block_resolutions}

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def _per_block_w(self, w: torch.Tensor, batch: int) -> list[torch.Tensor]:
        if w.dim() == 1:
            w = w.unsqueeze(0)
        if w.dim() == 2:
            return [w] * self.num_blocks
        if w.dim() == 3:
            if w.shape[1] != self.num_blocks:
                raise ConfigError(
                    f"per-block w has {w.shape[1]} entries, generator has {self.num_blocks} blocks"
                )
            return [w[:, i] for i in range(self.num_blocks)]
        raise ConfigError(f"w must have 1..3 dims, got {w.dim()}")

    def synthesize(self, w: torch.Tensor, noise: dict[int, torch.Tensor]) -> torch.Tensor:
        """Render an image batch from style w and the per-scale noise features.

        Returns (batch, 3, base, base) values mapped from the network's
        nominal [-1, 1] range into [0, 1] (not clamped, to keep gradients).
        """
        resolutions = self.config.block_resolutions
        missing = [r for r in resolutions if r not in noise]
        if missing:
            raise ConfigError(f"missing noise features at resolutions {missing}")
        batch = noise[resolutions[0]].shape[0]
        ws = self._per_block_w(w, batch)

        y = self.constant.unsqueeze(0).expand(batch, -1, -1, -1)
        skip = None
        for i, r in enumerate(resolutions):
            y = self.blocks[str(r)](y, ws[i], noise[r])
            rgb = self.to_rgb[str(r)](y, ws[i])
            if skip is None:
                skip = rgb
            else:
                skip = F.interpolate(skip, scale_factor=2, mode="nearest") + rgb
        return (skip + 1.0) / 2.0

    def forward(self, z: torch.Tensor, noise: dict[int, torch.Tensor]) -> torch.Tensor:
        return self.synthesize(self.map_latent(z), noise)

    def prior_parameter_names(self) -> list[str]:
        """Parameters of the GAN prior itself (mapping, constant, style convs,
        RGB heads) -- everything except the noise-fusion merges."""
        return [n for n, _ in self.named_parameters() if ".fuse." not in n]

    def noise_branch_parameter_names(self) -> list[str]:
        """Parameters of the per-scale noise fusion merges."""
        return [n for n, _ in self.named_parameters() if ".fuse." in n]
