"""Equalized-learning-rate conv and linear layers.

Raw weights are kept at unit scale and multiplied by 1/sqrt(fan_in) in the
forward pass, so a given optimizer step moves every layer's effective
weights by a comparable amount. This is the parametrization the training
learning rates assume; without it, high-rate groups blow up.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

__all__ = ["EqualConv2d", "EqualLinear"]


class EqualConv2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(
            torch.randn(out_channels, in_channels, kernel_size, kernel_size)
        )
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size**2)
        self.stride = stride
        self.padding = padding
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(
            x, self.weight * self.scale, self.bias, stride=self.stride, padding=self.padding
        )

    def effective_weight(self) -> torch.Tensor:
        """The kernel actually applied in the forward pass."""
        return self.weight * self.scale

    def set_effective_weight_(self, kernel: torch.Tensor) -> "EqualConv2d":
        """Assign raw weights so the forward pass applies exactly `kernel`."""
        with torch.no_grad():
            self.weight.copy_(kernel / self.scale)
        return self

    def __repr__(self) -> str:
        out_ch, in_ch, k, _ = self.weight.shape
        return f"EqualConv2d({in_ch}, {out_ch}, kernel_size={k}, stride={self.stride})"


class EqualLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 bias_init: float = 0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features))
        self.scale = 1.0 / math.sqrt(in_features)
        self.bias = (
            nn.Parameter(torch.full((out_features,), float(bias_init))) if bias else None
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.scale, self.bias)

    def __repr__(self) -> str:
        out_f, in_f = self.weight.shape
        return f"EqualLinear({in_f}, {out_f})"
