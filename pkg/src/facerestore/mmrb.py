"""Mixed multi-path residual block.

The input is split into two channel halves processed by a 3x3 and a 5x5
branch; the branch outputs are concatenated and run through both branches
again, then a 1x1 convolution fuses the paths back to the input width and a
residual skip closes the block. PReLU follows every convolution.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .equalized import EqualConv2d
from .errors import ConfigError

__all__ = ["split_channels", "Mmrb", "PlainResidualBlock", "full_width_baseline_param_count"]


def split_channels(fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split a (..., C, H, W) tensor into its first and second channel halves.

    Concatenating the two halves along the channel axis restores the input
    bit-exactly.
    """
    channels = fmap.shape[-3]
    if channels % 2:
        raise ConfigError(f"channel count must be even to split, got {channels}")
    half = channels // 2
    return fmap.narrow(-3, 0, half), fmap.narrow(-3, half, half)


class Mmrb(nn.Module):
    """Two-stage split-branch residual block preserving shape (C, H, W).

    share_branch_kernels reuses the wide second-stage kernels for the first
    stage (sliced to the half-width input) instead of allocating separate
    first-stage parameters.
    """

    def __init__(self, channels: int, share_branch_kernels: bool = False):
        super().__init__()
        if channels < 2 or channels % 2:
            raise ConfigError(f"MMRB channels must be even and >= 2, got {channels}")
        self.channels = channels
        self.share_branch_kernels = share_branch_kernels
        half = channels // 2

        if not share_branch_kernels:
            self.conv3_first = EqualConv2d(half, half, 3, padding=1)
            self.conv5_first = EqualConv2d(half, half, 5, padding=2)
        self.conv3_second = EqualConv2d(channels, half, 3, padding=1)
        self.conv5_second = EqualConv2d(channels, half, 5, padding=2)
        self.fuse = EqualConv2d(channels, channels, 1)

        self.act3_first = nn.PReLU(init=0.25)
        self.act5_first = nn.PReLU(init=0.25)
        self.act3_second = nn.PReLU(init=0.25)
        self.act5_second = nn.PReLU(init=0.25)
        self.act_fuse = nn.PReLU(init=0.25)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.shape[-3] != self.channels:
            raise ConfigError(
                f"MMRB built for {self.channels} channels, got {fmap.shape[-3]}"
            )
        half = self.channels // 2
        x1, x2 = split_channels(fmap)

        if self.share_branch_kernels:
            # reuse the wide kernels, sliced to the half that carries this branch
            w3 = self.conv3_second.weight[:, :half] * self.conv3_second.scale
            w5 = self.conv5_second.weight[:, half:] * self.conv5_second.scale
            p1 = self.act3_first(F.conv2d(x1, w3, self.conv3_second.bias, padding=1))
            p2 = self.act5_first(F.conv2d(x2, w5, self.conv5_second.bias, padding=2))
        else:
            p1 = self.act3_first(self.conv3_first(x1))
            p2 = self.act5_first(self.conv5_first(x2))

        mixed = torch.cat([p1, p2], dim=-3)
        p1b = self.act3_second(self.conv3_second(mixed))
        p2b = self.act5_second(self.conv5_second(mixed))

        fused = self.act_fuse(self.fuse(torch.cat([p1b, p2b], dim=-3)))
        return fmap + fused

    def zero_fusion_(self) -> "Mmrb":
        """Zero the fusion convolution in place, making the block an exact identity."""
        with torch.no_grad():
            self.fuse.weight.zero_()
            self.fuse.bias.zero_()
        return self


class PlainResidualBlock(nn.Module):
    """conv3x3 -> PReLU -> conv3x3 with a residual skip; the no-MMRB ablation stand-in."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = EqualConv2d(channels, channels, 3, padding=1)
        self.conv2 = EqualConv2d(channels, channels, 3, padding=1)
        self.act = nn.PReLU(init=0.25)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.shape[-3] != self.channels:
            raise ConfigError(
                f"residual block built for {self.channels} channels, got {fmap.shape[-3]}"
            )
        return fmap + self.conv2(self.act(self.conv1(fmap)))


def full_width_baseline_param_count(channels: int) -> int:
    """Parameters of two stacked full-width stages, each a 3x3 plus a 5x5
    convolution at full channel width; the reference the split structure is
    counted against."""
    conv3 = 9 * channels * channels + channels
    conv5 = 25 * channels * channels + channels
    return 2 * (conv3 + conv5)
