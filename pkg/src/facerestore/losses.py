"""Training objectives: global/local adversarial, content, identity
preserving, multi-scale restoration, and the discriminator-side losses.

Generator-side terms follow the non-saturating logistic convention for the
global critic and log(1 - D) for the region critics. Perceptual terms run
through pluggable, fixed feature extractors: the test profile uses identity
or seeded random-projection stacks so nothing external is needed; the
pretrained profile loads externally supplied weights from a container file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .discriminators import ROI_REGIONS
from .errors import ConfigError, NumericError

__all__ = [
    "LossWeights",
    "LossReport",
    "adv_g_loss",
    "adv_local_loss",
    "adv_combined",
    "l1_loss",
    "feature_matching_loss",
    "content_loss",
    "identity_loss",
    "total_loss",
    "discriminator_loss",
    "local_discriminator_loss",
    "IdentityExtractor",
    "IdentityEmbedding",
    "ConvStackExtractor",
    "ConvStackEmbedding",
    "build_extractors",
]

LOCAL_CLAMP = 1.0 - 1e-6
REPORT_TOL = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Loss combination weights; defaults follow the production recipe."""

    adv_global: float = 0.5
    adv_local: float = 3.0
    l1: float = 8.0
    feature_match: float = 0.02
    face: float = 10.0
    reconstruction: float = 1.0

    def validate(self) -> "LossWeights":
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {value}")
        return self


@dataclass
class LossReport:
    """Per-iteration scalars. Component fields are raw (unweighted) values;
    total is their weighted combination, verified at construction."""

    adv_g: float
    adv_l: float
    l1: float
    fm: float
    fp: float
    rec: float
    total: float
    d_global: float
    d_local: float

    def expected_total(self, weights: LossWeights) -> float:
        return (
            weights.adv_global * self.adv_g
            + weights.adv_local * self.adv_l
            + weights.l1 * self.l1
            + weights.feature_match * self.fm
            + weights.face * self.fp
            + weights.reconstruction * self.rec
        )

    def verify(self, weights: LossWeights) -> "LossReport":
        expected = self.expected_total(weights)
        if not math.isfinite(self.total):
            raise NumericError(f"non-finite total loss: {self}")
        if abs(expected - self.total) > REPORT_TOL:
            raise NumericError(
                f"loss report total {self.total} does not match combination {expected}"
            )
        return self


def _finite(value: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NumericError(f"{name} is non-finite")
    return value


def adv_g_loss(fake_logit: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term: softplus(-logit), stable for any magnitude."""
    _finite(fake_logit, "fake logit")
    return F.softplus(-fake_logit).mean()


def adv_local_loss(roi_probs: dict[str, torch.Tensor]) -> torch.Tensor:
    """Sum over regions of log(1 - D_roi(fake)); probabilities clamped below 1."""
    missing = [r for r in ROI_REGIONS if r not in roi_probs]
    if missing:
        raise ConfigError(f"missing ROI probabilities for regions {missing}")
    total = None
    for region in ROI_REGIONS:
        p = roi_probs[region]
        _finite(p, f"{region} probability")
        if (p <= 0).any() or (p >= 1).any():
            raise ConfigError(f"{region} probability outside (0, 1)")
        term = torch.log1p(-p.clamp(max=LOCAL_CLAMP)).mean()
        total = term if total is None else total + term
    return total


def adv_combined(g_term: torch.Tensor | float, l_term: torch.Tensor | float,
                 weights: LossWeights) -> torch.Tensor | float:
    return weights.adv_global * g_term + weights.adv_local * l_term


def l1_loss(x: torch.Tensor, x_prime: torch.Tensor) -> torch.Tensor:
    if x.shape != x_prime.shape:
        raise ConfigError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_prime.shape)}")
    return (x - x_prime).abs().mean()


def feature_matching_loss(x: torch.Tensor, x_prime: torch.Tensor, extractor) -> torch.Tensor:
    """Sum over extractor layers of the RMS feature difference.

    Each layer's L2 norm is divided by the square root of its element count
    so the weight is resolution-independent.
    """
    if x.shape != x_prime.shape:
        raise ConfigError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_prime.shape)}")
    feats_x = extractor(x)
    feats_y = extractor(x_prime)
    if len(feats_x) < 1:
        raise ConfigError("extractor produced no feature layers")
    total = None
    for fx, fy in zip(feats_x, feats_y):
        diff = fx - fy
        per_sample = torch.sqrt(diff.flatten(1).pow(2).mean(dim=1)).mean()
        total = per_sample if total is None else total + per_sample
    return total


def content_loss(x: torch.Tensor, x_prime: torch.Tensor, extractor,
                 weights: LossWeights) -> torch.Tensor:
    """Weighted pixel L1 plus feature matching."""
    return weights.l1 * l1_loss(x, x_prime) + weights.feature_match * feature_matching_loss(
        x, x_prime, extractor
    )


def identity_loss(x: torch.Tensor, x_prime: torch.Tensor, face_extractor,
                  weights: LossWeights) -> torch.Tensor:
    """Weighted L1 between fixed face embeddings of the two images."""
    ex = face_extractor(x)
    ey = face_extractor(x_prime)
    if ex.shape != ey.shape:
        raise ConfigError(f"embedding shape mismatch {tuple(ex.shape)} vs {tuple(ey.shape)}")
    return weights.face * (ex - ey).abs().mean()


def discriminator_loss(real_logit: torch.Tensor, fake_logit: torch.Tensor) -> torch.Tensor:
    """Logistic discriminator objective: softplus(-real) + softplus(fake)."""
    _finite(real_logit, "real logit")
    _finite(fake_logit, "fake logit")
    return F.softplus(-real_logit).mean() + F.softplus(fake_logit).mean()


def local_discriminator_loss(real_prob: torch.Tensor, fake_prob: torch.Tensor) -> torch.Tensor:
    """Two-term cross entropy on region probabilities."""
    for name, p in (("real", real_prob), ("fake", fake_prob)):
        _finite(p, f"{name} probability")
        if (p <= 0).any() or (p >= 1).any():
            raise ConfigError(f"{name} probability outside (0, 1)")
    return -(torch.log(real_prob).mean() + torch.log1p(-fake_prob).mean())


def total_loss(
    adv_g: float,
    adv_l: float,
    l1: float,
    fm: float,
    fp: float,
    rec: float,
    weights: LossWeights,
    d_global: float = 0.0,
    d_local: float = 0.0,
) -> LossReport:
    """Assemble and verify the per-iteration report from raw component values."""
    report = LossReport(
        adv_g=float(adv_g),
        adv_l=float(adv_l),
        l1=float(l1),
        fm=float(fm),
        fp=float(fp),
        rec=float(rec),
        total=0.0,
        d_global=float(d_global),
        d_local=float(d_local),
    )
    report.total = report.expected_total(weights)
    return report.verify(weights)


class IdentityExtractor(nn.Module):
    """Feature extractor with a single layer: the image itself."""

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [x]


class IdentityEmbedding(nn.Module):
    """Face embedding that flattens the image; the test-profile stand-in."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x.flatten(1)


class ConvStackExtractor(nn.Module):
    """Fixed stride-2 conv stack; every layer's activation is a feature level.

    Weights are seeded at construction and never trained, so features are
    deterministic. Externally trained weights can be loaded over the same
    structure through the checkpoint container (see trainer.load_parameters).
    """

    def __init__(self, layers: int = 3, base_channels: int = 8, seed: int = 0,
                 in_channels: int = 3):
        super().__init__()
        if layers < 1:
            raise ConfigError("extractor needs at least one layer")
        self.spec = {"layers": layers, "base_channels": base_channels, "seed": seed,
                     "in_channels": in_channels}
        gen = torch.Generator().manual_seed(seed)
        convs = []
        ch_in = in_channels
        for i in range(layers):
            ch_out = base_channels * (2**i)
            conv = nn.Conv2d(ch_in, ch_out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / math.sqrt(ch_in * 9)
                )
                conv.bias.zero_()
            convs.append(conv)
            ch_in = ch_out
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        out = x
        for conv in self.convs:
            out = F.leaky_relu(conv(out), 0.2)
            feats.append(out)
        return feats


class ConvStackEmbedding(nn.Module):
    """Fixed conv stack pooled to a vector; the face-embedding stand-in."""

    def __init__(self, layers: int = 3, base_channels: int = 8, seed: int = 1):
        super().__init__()
        self.spec = {"layers": layers, "base_channels": base_channels, "seed": seed}
        self.stack = ConvStackExtractor(layers, base_channels, seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stack(x)[-1].mean(dim=(2, 3))


def build_extractors(profile: str, seed: int = 0, container: str | None = None):
    """Construct the (perceptual, face) extractor pair for a profile.

    "test" yields seeded random-projection stacks; "identity" yields the
    identity/flatten pair used in analytic tests; "pretrained" requires a
    container path with externally supplied weights.
    """
    if profile == "identity":
        return IdentityExtractor(), IdentityEmbedding()
    if profile == "test":
        return (
            ConvStackExtractor(layers=3, base_channels=8, seed=seed),
            ConvStackEmbedding(layers=3, base_channels=8, seed=seed + 1),
        )
    if profile == "pretrained":
        if container is None:
            raise ConfigError(
                "extractor_profile 'pretrained' requires an extractor container path"
            )
        from .trainer import load_extractor_pair

        return load_extractor_pair(container)
    raise ConfigError(f"unknown extractor profile {profile!r}")
