"""Global discriminator with layer freezing, local ROI discriminators, and
facial region extraction.

The global critic is a strided conv ladder from the training resolution down
to 4x4 with a dense head emitting an unbounded realness logit. Freezing
excludes the input-side (highest resolution) conv layers from training.
Three local critics share one architecture but own separate parameters and
score eye/mouth crops with a sigmoid probability. Regions come either from
68-point landmarks or from fixed fractional boxes for aligned faces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, DataError
from .imaging import resize, validate_image
from .schedule import channel_schedule, resolution_ladder
from .tensorops import crop_resize_tensor

__all__ = [
    "ROI_REGIONS",
    "DEFAULT_FRACTIONAL_BOXES",
    "RoiSet",
    "FreezePlan",
    "GlobalDiscriminator",
    "LocalDiscriminator",
    "apply_freeze",
    "default_frozen_count",
    "roi_boxes",
    "extract_rois",
    "crop_rois_tensor",
    "load_landmarks",
]

ROI_REGIONS = ("left_eye", "right_eye", "mouth")

# 68-point landmark index ranges (iBUG ordering), end-exclusive
LANDMARK_SLICES = {"left_eye": (36, 42), "right_eye": (42, 48), "mouth": (48, 68)}

# (x0, y0, w, h) fractions of the image used when no landmarks are available
DEFAULT_FRACTIONAL_BOXES = {
    "left_eye": (0.20, 0.35, 0.22, 0.15),
    "right_eye": (0.58, 0.35, 0.22, 0.15),
    "mouth": (0.30, 0.62, 0.40, 0.18),
}

LOCAL_PROB_EPS = 1e-6


@dataclass
class RoiSet:
    """Pixel boxes (x0, y0, w, h) and fixed-size crops for the three regions."""

    boxes: dict[str, tuple[int, int, int, int]]
    crops: dict[str, np.ndarray]


@dataclass
class FreezePlan:
    """Conv layers excluded from discriminator updates, input side first."""

    frozen_layer_count: int
    layer_names: list[str] = field(default_factory=list)
    parameter_names: list[str] = field(default_factory=list)


class _ConvLadder(nn.Module):
    """Shared body: from-RGB conv then stride-2 convs down to 4x4, dense head."""

    def __init__(self, resolution: int, channels: dict[int, int]):
        super().__init__()
        self.resolution = resolution
        ladder = resolution_ladder(resolution, 4)
        self.from_rgb = nn.Conv2d(3, channels[resolution], 3, padding=1)
        self.downs = nn.ModuleDict()
        for r in reversed(ladder[1:]):
            self.downs[str(r)] = nn.Conv2d(channels[r], channels[r // 2], 3, stride=2, padding=1)
        self.final_conv = nn.Conv2d(channels[4], channels[4], 3, padding=1)
        self.head = nn.Linear(channels[4] * 16, 1)
        self._ladder = ladder

    def conv_layer_names(self) -> list[str]:
        """Ladder conv layers ordered from the input resolution downward."""
        names = ["from_rgb"]
        names += [f"downs.{r}" for r in reversed(self._ladder[1:])]
        return names

    def features(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1] != 3:
            raise ConfigError(f"expected (N, 3, H, W) input, got {tuple(img.shape)}")
        if img.shape[-2:] != (self.resolution, self.resolution):
            raise ConfigError(
                f"discriminator built for {self.resolution}x{self.resolution}, "
                f"got {img.shape[-2]}x{img.shape[-1]}"
            )
        out = F.leaky_relu(self.from_rgb(img), 0.2)
        for r in reversed(self._ladder[1:]):
            out = F.leaky_relu(self.downs[str(r)](out), 0.2)
        out = F.leaky_relu(self.final_conv(out), 0.2)
        return self.head(out.flatten(1)).squeeze(1)


class GlobalDiscriminator(nn.Module):
    """Whole-image critic; returns one unbounded logit per image."""

    def __init__(self, resolution: int, channels: dict[int, int] | None = None,
                 channel_base: int = 32, channel_max: int = 512):
        super().__init__()
        channels = channels or channel_schedule(resolution, channel_base, channel_max)
        self.body = _ConvLadder(resolution, channels)

    def conv_layer_names(self) -> list[str]:
        return [f"body.{n}" for n in self.body.conv_layer_names()]

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.body.features(img)


class LocalDiscriminator(nn.Module):
    """Region critic; same ladder, sigmoid head with outputs strictly in (0, 1)."""

    def __init__(self, roi_size: int = 64, channels: dict[int, int] | None = None,
                 channel_base: int = 16, channel_max: int = 256):
        super().__init__()
        channels = channels or channel_schedule(roi_size, channel_base, channel_max)
        self.body = _ConvLadder(roi_size, channels)

    def forward(self, roi: torch.Tensor) -> torch.Tensor:
        logit = self.body.features(roi)
        return torch.sigmoid(logit).clamp(LOCAL_PROB_EPS, 1.0 - LOCAL_PROB_EPS)


def default_frozen_count(disc: GlobalDiscriminator) -> int:
    """Production freezes the first five conv layers; shallow ladders scale down."""
    total = len(disc.conv_layer_names())
    return max(0, min(5, total - 2))


def apply_freeze(disc: GlobalDiscriminator, n_frozen: int) -> FreezePlan:
    """Mark the n_frozen input-side conv layers as non-trainable and list them."""
    layers = disc.conv_layer_names()
    if n_frozen < 0:
        raise ConfigError(f"n_frozen must be >= 0, got {n_frozen}")
    if n_frozen > len(layers):
        raise ConfigError(f"n_frozen {n_frozen} exceeds {len(layers)} conv layers")
    frozen_layers = layers[:n_frozen]
    param_names = []
    for name, param in disc.named_parameters():
        if any(name.startswith(layer + ".") for layer in frozen_layers):
            param.requires_grad_(False)
            param_names.append(name)
    return FreezePlan(
        frozen_layer_count=n_frozen,
        layer_names=frozen_layers,
        parameter_names=sorted(param_names),
    )


def _landmark_box(
    points: np.ndarray, region: str, margin: float, height: int, width: int
) -> tuple[int, int, int, int]:
    lo, hi = LANDMARK_SLICES[region]
    cluster = points[lo:hi]
    x_min, y_min = cluster.min(axis=0)
    x_max, y_max = cluster.max(axis=0)
    bw, bh = x_max - x_min, y_max - y_min
    x0 = int(np.floor(x_min - margin * bw))
    y0 = int(np.floor(y_min - margin * bh))
    x1 = int(np.ceil(x_max + margin * bw))
    y1 = int(np.ceil(y_max + margin * bh))
    return x0, y0, x1 - x0, y1 - y0


def _clamp_box(
    box: tuple[int, int, int, int], height: int, width: int
) -> tuple[int, int, int, int]:
    x0, y0, w, h = box
    x0c, y0c = max(0, x0), max(0, y0)
    x1c, y1c = min(width, x0 + w), min(height, y0 + h)
    if x1c - x0c < 1 or y1c - y0c < 1:
        raise DataError(f"ROI box {box} degenerate after clamping to {width}x{height}")
    return x0c, y0c, x1c - x0c, y1c - y0c


def roi_boxes(
    height: int,
    width: int,
    landmarks: np.ndarray | None = None,
    margin: float = 0.15,
    fractions: dict[str, tuple[float, float, float, float]] | None = None,
) -> dict[str, tuple[int, int, int, int]]:
    """Pixel boxes for the three facial regions, clamped to the image.

    With landmarks, boxes bound the region's point cluster padded by margin.
    Without, fixed fractional boxes for aligned faces are used.
    """
    fractions = fractions or DEFAULT_FRACTIONAL_BOXES
    boxes = {}
    if landmarks is not None:
        landmarks = np.asarray(landmarks, dtype=np.float64)
        if landmarks.shape != (68, 2):
            raise DataError(f"expected 68 (x, y) landmarks, got shape {landmarks.shape}")
        if (landmarks[:, 0].min() < 0 or landmarks[:, 0].max() >= width
                or landmarks[:, 1].min() < 0 or landmarks[:, 1].max() >= height):
            raise DataError("landmarks fall outside the image")
        for region in ROI_REGIONS:
            boxes[region] = _clamp_box(
                _landmark_box(landmarks, region, margin, height, width), height, width
            )
    else:
        for region in ROI_REGIONS:
            fx, fy, fw, fh = fractions[region]
            box = (
                int(round(fx * width)),
                int(round(fy * height)),
                int(round(fw * width)),
                int(round(fh * height)),
            )
            boxes[region] = _clamp_box(box, height, width)
    return boxes


def extract_rois(
    img: np.ndarray,
    landmarks: np.ndarray | None = None,
    roi_size: int = 64,
    margin: float = 0.15,
) -> RoiSet:
    """Crop and resize the three facial regions of an image."""
    validate_image(img, "image")
    h, w, _ = img.shape
    boxes = roi_boxes(h, w, landmarks, margin)
    crops = {}
    for region, (x0, y0, bw, bh) in boxes.items():
        crops[region] = resize(img[y0 : y0 + bh, x0 : x0 + bw], roi_size, roi_size, "bilinear")
    return RoiSet(boxes=boxes, crops=crops)


def crop_rois_tensor(
    imgs: torch.Tensor,
    boxes: dict[str, tuple[int, int, int, int]],
    roi_size: int,
) -> dict[str, torch.Tensor]:
    """Differentiable batched ROI crops for training (bilinear resize)."""
    return {
        region: crop_resize_tensor(imgs, boxes[region], roi_size, "bilinear")
        for region in ROI_REGIONS
    }


def load_landmarks(path: str | Path) -> dict[str, np.ndarray]:
    """Read a JSONL landmark file: one {"image": name, "points": [[x, y] * 68]} per line."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"landmark file not found: {path}")
    table: dict[str, np.ndarray] = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                name = record["image"]
                points = np.asarray(record["points"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataError(f"{path}:{line_no}: bad landmark record: {exc}") from exc
            if points.shape != (68, 2):
                raise DataError(
                    f"{path}:{line_no}: expected 68 (x, y) points, got shape {points.shape}"
                )
            table[name] = points
    return table
