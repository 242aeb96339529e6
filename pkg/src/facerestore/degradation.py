"""Blur -> downsample -> noise -> JPEG degradation and paired-data synthesis.

Low-quality training inputs are produced from high-quality faces by a
four-stage pipeline with randomly sampled parameters; each stage can be
bypassed. Synthesis is reproducible: pair i derives its own seed from the
global one, so reruns (and parallel runs) are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .imaging import jpeg_roundtrip, load_image, resize, save_image, validate_image

__all__ = [
    "DegradationRanges",
    "DegradationParams",
    "sample_params",
    "make_blur_kernel",
    "degrade",
    "synthesize_pairs",
    "read_manifest",
    "identity_params",
]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class DegradationRanges:
    """Sampling ranges for the degradation parameters.

    Defaults follow the production recipe: fixed 41-tap kernels, scale in
    [0.4, 8], 8-bit noise sigma in [0, 25], JPEG quality in [5, 50], and a
    50/50 gaussian/motion blur mix.
    """

    kernel_size: int = 41
    gaussian_sigma: tuple[float, float] = (0.2, 10.0)
    motion_length: tuple[float, float] = (3.0, 41.0)
    motion_angle: tuple[float, float] = (0.0, 180.0)
    scale: tuple[float, float] = (0.4, 8.0)
    noise_sigma: tuple[float, float] = (0.0, 25.0)
    jpeg_quality: tuple[int, int] = (5, 50)
    motion_prob: float = 0.5

    def validate(self) -> "DegradationRanges":
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        for name in ("gaussian_sigma", "motion_length", "motion_angle", "scale", "noise_sigma", "jpeg_quality"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: inverted range ({lo}, {hi})")
        if self.gaussian_sigma[0] <= 0:
            raise ConfigError("gaussian_sigma must be positive")
        if self.motion_length[0] < 1:
            raise ConfigError("motion_length must be >= 1")
        if self.scale[0] <= 0:
            raise ConfigError("scale must be positive")
        if self.noise_sigma[0] < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if not (1 <= self.jpeg_quality[0] and self.jpeg_quality[1] <= 100):
            raise ConfigError("jpeg_quality must lie in 1..100")
        if not 0.0 <= self.motion_prob <= 1.0:
            raise ConfigError("motion_prob must be in [0, 1]")
        return self


@dataclass
class DegradationParams:
    """One sampled degradation: blur kernel spec, scale, noise level, JPEG quality."""

    kernel_kind: str = "gaussian"  # "gaussian" | "motion"
    kernel_size: int = 41
    gaussian_sigma: float = 1.0
    motion_length: float = 1.0
    motion_angle: float = 0.0
    scale_s: float = 1.0
    noise_sigma: float = 0.0  # std on the 8-bit scale
    jpeg_q: int = 50
    skip_blur: bool = False
    skip_resize: bool = False
    skip_noise: bool = False
    skip_jpeg: bool = False

    def validate(self) -> "DegradationParams":
        if self.kernel_kind not in ("gaussian", "motion"):
            raise ConfigError(f"unknown kernel_kind {self.kernel_kind!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.gaussian_sigma <= 0:
            raise ConfigError("gaussian_sigma must be > 0")
        if self.motion_length < 1:
            raise ConfigError("motion_length must be >= 1")
        if self.scale_s <= 0:
            raise ConfigError("scale_s must be > 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 1 <= self.jpeg_q <= 100:
            raise ConfigError(f"jpeg_q must be in 1..100, got {self.jpeg_q}")
        return self


def identity_params() -> DegradationParams:
    """Parameters that bypass every stage; degrade() becomes the identity map."""
    return DegradationParams(
        kernel_kind="motion",
        kernel_size=1,
        motion_length=1.0,
        scale_s=1.0,
        noise_sigma=0.0,
        jpeg_q=100,
        skip_blur=True,
        skip_resize=True,
        skip_noise=True,
        skip_jpeg=True,
    )


def sample_params(rng: np.random.Generator, ranges: DegradationRanges | None = None) -> DegradationParams:
    """Draw one parameter tuple uniformly from the configured ranges.

    The draw order is fixed so a given generator state always yields the
    same tuple regardless of the blur kind chosen.
    """
    ranges = (ranges or DegradationRanges()).validate()
    kind = "motion" if rng.random() < ranges.motion_prob else "gaussian"
    sigma = rng.uniform(*ranges.gaussian_sigma)
    length = rng.uniform(*ranges.motion_length)
    angle = rng.uniform(*ranges.motion_angle)
    scale_s = rng.uniform(*ranges.scale)
    delta = rng.uniform(*ranges.noise_sigma)
    q = int(rng.integers(ranges.jpeg_quality[0], ranges.jpeg_quality[1] + 1))
    return DegradationParams(
        kernel_kind=kind,
        kernel_size=ranges.kernel_size,
        gaussian_sigma=sigma,
        motion_length=length,
        motion_angle=angle,
        scale_s=scale_s,
        noise_sigma=delta,
        jpeg_q=q,
    ).validate()


def make_blur_kernel(params: DegradationParams) -> np.ndarray:
    """Build the normalized blur kernel described by params.

    Gaussian kernels are isotropic (symmetric under 90-degree rotation).
    Motion kernels rasterize a line segment through the kernel center at
    motion_angle with the given length; length 1 degenerates to a delta.
    """
    params.validate()
    size = params.kernel_size
    c = (size - 1) / 2.0
    if params.kernel_kind == "gaussian":
        ax = np.arange(size, dtype=np.float64) - c
        xx, yy = np.meshgrid(ax, ax)
        kernel = np.exp(-(xx**2 + yy**2) / (2.0 * params.gaussian_sigma**2))
    else:
        kernel = np.zeros((size, size), dtype=np.float64)
        theta = np.deg2rad(params.motion_angle)
        dx, dy = np.cos(theta), np.sin(theta)
        half = (params.motion_length - 1.0) / 2.0
        steps = max(1, int(np.ceil(params.motion_length * 8)))
        for t in np.linspace(-half, half, steps):
            x, y = c + t * dx, c + t * dy
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            fx, fy = x - x0, y - y0
            for ix, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                for iy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
                    if 0 <= ix < size and 0 <= iy < size:
                        kernel[iy, ix] += wx * wy
    total = kernel.sum()
    if total <= 0:
        raise ConfigError("blur kernel has zero mass")
    return kernel / total


def degrade(hq: np.ndarray, params: DegradationParams, rng: np.random.Generator) -> np.ndarray:
    """Apply blur, 1/s resize, additive gaussian noise, and JPEG, then resize back.

    Output has the same spatial size as the input. Given the same inputs and
    generator state the result is bit-identical.
    """
    validate_image(hq, "hq")
    params.validate()
    h, w, _ = hq.shape
    out = hq.copy()

    if not params.skip_blur:
        kernel = make_blur_kernel(params)
        out = np.stack(
            [ndimage.convolve(out[:, :, ch], kernel, mode="mirror") for ch in range(out.shape[2])],
            axis=2,
        )
        out = np.clip(out, 0.0, 1.0)

    if not params.skip_resize and params.scale_s != 1.0:
        inter_h = max(1, int(round(h / params.scale_s)))
        inter_w = max(1, int(round(w / params.scale_s)))
        out = resize(out, inter_h, inter_w, "bicubic")

    if not params.skip_noise and params.noise_sigma > 0:
        out = np.clip(out + rng.normal(0.0, params.noise_sigma / 255.0, out.shape), 0.0, 1.0)

    if not params.skip_jpeg:
        out = jpeg_roundtrip(out, params.jpeg_q)

    if out.shape[:2] != (h, w):
        out = resize(out, h, w, "bicubic")
    return out


def _list_corpus(hq_dir: Path) -> list[Path]:
    files = sorted(p for p in hq_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images found in {hq_dir}")
    return files


def synthesize_pairs(
    hq_dir: str | Path,
    out_dir: str | Path,
    count: int,
    seed: int,
    ranges: DegradationRanges | None = None,
    resolution: int | None = None,
) -> Path:
    """Write count LQ/HQ PNG pairs plus a JSONL manifest; returns the manifest path.

    HQ images are used round-robin in sorted filename order. Pair i runs on
    seed + i, so any subset of pairs can be regenerated independently.
    If resolution is set, HQ images are bicubic-resized to that square size
    before degradation.
    """
    hq_dir = Path(hq_dir)
    out_dir = Path(out_dir)
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    ranges = (ranges or DegradationRanges()).validate()
    if not hq_dir.is_dir():
        raise DataError(f"hq directory not found: {hq_dir}")
    files = _list_corpus(hq_dir)

    out_dir.mkdir(parents=True, exist_ok=True)
    cache: dict[Path, np.ndarray] = {}
    records = []
    for i in range(count):
        src = files[i % len(files)]
        if src not in cache:
            img = load_image(src, drop_alpha=True)
            if img.shape[2] == 1:
                img = np.repeat(img, 3, axis=2)
            if resolution is not None:
                img = resize(img, resolution, resolution, "bicubic")
            # quantize up front so the saved HQ file and the degraded source agree
            cache[src] = np.round(img * 255.0) / 255.0
        hq = cache[src]

        pair_seed = seed + i
        rng = np.random.default_rng(pair_seed)
        params = sample_params(rng, ranges)
        lq = degrade(hq, params, rng)

        hq_path = out_dir / f"pair_{i:05d}_hq.png"
        lq_path = out_dir / f"pair_{i:05d}_lq.png"
        save_image(hq, hq_path, format="png")
        save_image(lq, lq_path, format="png")
        records.append(
            {
                "pair_id": i,
                "hq_path": hq_path.name,
                "lq_path": lq_path.name,
                "source": src.name,
                "seed": pair_seed,
                "kernel_kind": params.kernel_kind,
                "kernel_size": params.kernel_size,
                "sigma": params.gaussian_sigma,
                "length": params.motion_length,
                "angle": params.motion_angle,
                "s": params.scale_s,
                "delta": params.noise_sigma,
                "q": params.jpeg_q,
            }
        )

    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def read_manifest(path: str | Path) -> list[dict]:
    """Parse a synthesis manifest back into a list of per-pair records."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: bad manifest line: {exc}") from exc
    if not records:
        raise DataError(f"manifest is empty: {path}")
    return records
