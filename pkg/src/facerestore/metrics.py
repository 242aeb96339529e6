"""Image quality metrics: PSNR, SSIM, NIQE, and pluggable deep-feature scores.

PSNR and SSIM are reference metrics computed natively (SSIM on BT.601
luma with an 11x11 sigma-1.5 gaussian window, valid positions only). NIQE
fits a multivariate gaussian of natural-scene-statistics features to a
pristine corpus and scores test images by distribution distance; the
pristine model is fit from a user-supplied corpus, never bundled. LPIPS- and
FID-style scores require an externally configured deep feature extractor and
are reported as unavailable otherwise, never silently zero.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, ndimage
from scipy.special import gamma as gamma_fn

from .errors import ConfigError, DataError
from .imaging import load_image, rgb_to_luma, validate_image

__all__ = [
    "psnr",
    "ssim",
    "NiqeModel",
    "niqe_fit",
    "niqe_score",
    "lpips_like",
    "fid_like",
    "MetricReport",
    "evaluate_dirs",
    "DeepFeatureAdapter",
]

PSNR_CAP_DB = 100.0
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0, cap: float = PSNR_CAP_DB) -> float:
    """10 * log10(peak^2 / MSE) in dB; identical images report the cap."""
    validate_image(a, "a")
    validate_image(b, "b")
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return cap
    return 10.0 * math.log10(peak**2 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()


def _window_means(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable weighted local means, valid positions only."""
    half = len(window) // 2
    tmp = ndimage.correlate1d(img, window, axis=0, mode="constant")
    out = ndimage.correlate1d(tmp, window, axis=1, mode="constant")
    return out[half:-half or None, half:-half or None]


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    peak: float = 1.0,
) -> float:
    """Mean local SSIM over a gaussian-weighted window on the luma channel.

    Symmetric in (a, b); requires both spatial dimensions >= window.
    """
    validate_image(a, "a")
    validate_image(b, "b")
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    h, w, _ = a.shape
    if min(h, w) < window:
        raise DataError(f"image {h}x{w} smaller than SSIM window {window}")
    x = rgb_to_luma(a)
    y = rgb_to_luma(b)
    win = _gaussian_window(window, sigma)

    mu_x = _window_means(x, win)
    mu_y = _window_means(y, win)
    xx = _window_means(x * x, win)
    yy = _window_means(y * y, win)
    xy = _window_means(x * y, win)

    var_x = xx - mu_x**2
    var_y = yy - mu_y**2
    cov = xy - mu_x * mu_y
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


# ------------------------------------------------------------------------- NIQE

NIQE_MSCN_SIGMA = 7.0 / 6.0
NIQE_MSCN_RADIUS = 3
_AGGD_GAM = np.arange(0.2, 10.001, 0.001)
_AGGD_R = (gamma_fn(2.0 / _AGGD_GAM) ** 2) / (
    gamma_fn(1.0 / _AGGD_GAM) * gamma_fn(3.0 / _AGGD_GAM)
)


@dataclass
class NiqeModel:
    """Multivariate gaussian of pristine NSS features."""

    mean: np.ndarray
    cov: np.ndarray
    patch_size: int
    feature_dim: int = 36

    def validate(self) -> "NiqeModel":
        if self.mean.shape != (self.feature_dim,):
            raise DataError(f"NIQE mean has shape {self.mean.shape}")
        if self.cov.shape != (self.feature_dim, self.feature_dim):
            raise DataError(f"NIQE covariance has shape {self.cov.shape}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise DataError("NIQE covariance is not symmetric")
        return self

    def save(self, path: str | Path) -> None:
        payload = {
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "patch_size": self.patch_size,
            "feature_dim": self.feature_dim,
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "NiqeModel":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"NIQE model not found: {path}")
        data = json.loads(path.read_text())
        return cls(
            mean=np.asarray(data["mean"], dtype=np.float64),
            cov=np.asarray(data["cov"], dtype=np.float64),
            patch_size=int(data["patch_size"]),
            feature_dim=int(data["feature_dim"]),
        ).validate()


def _estimate_aggd(vec: np.ndarray) -> tuple[float, float, float]:
    """Asymmetric generalized gaussian fit: (shape alpha, left beta, right beta)."""
    vec = vec.ravel()
    left = vec[vec < 0]
    right = vec[vec > 0]
    left_std = math.sqrt(np.mean(left**2)) if left.size else 1e-6
    right_std = math.sqrt(np.mean(right**2)) if right.size else 1e-6
    gamma_hat = left_std / right_std
    mean_abs = np.mean(np.abs(vec))
    mean_sq = np.mean(vec**2)
    r_hat = (mean_abs**2 / mean_sq) if mean_sq > 0 else 1e-6
    r_hat_norm = r_hat * (gamma_hat**3 + 1) * (gamma_hat + 1) / (gamma_hat**2 + 1) ** 2
    alpha = _AGGD_GAM[np.argmin((_AGGD_R - r_hat_norm) ** 2)]
    ratio = math.sqrt(gamma_fn(1.0 / alpha) / gamma_fn(3.0 / alpha))
    return alpha, left_std * ratio, right_std * ratio


def _mscn(luma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-subtracted contrast-normalized coefficients and the sigma field."""
    win = _gaussian_window(2 * NIQE_MSCN_RADIUS + 1, NIQE_MSCN_SIGMA)
    mu = ndimage.correlate1d(
        ndimage.correlate1d(luma, win, axis=0, mode="nearest"), win, axis=1, mode="nearest"
    )
    mu_sq = ndimage.correlate1d(
        ndimage.correlate1d(luma * luma, win, axis=0, mode="nearest"),
        win,
        axis=1,
        mode="nearest",
    )
    sigma = np.sqrt(np.maximum(mu_sq - mu * mu, 0.0))
    return (luma - mu) / (sigma + 1.0), sigma


def _patch_features(mscn: np.ndarray) -> np.ndarray:
    """18 NSS features per patch: AGGD of the MSCN field and of four
    orientation pair products."""
    feats = []
    alpha, bl, br = _estimate_aggd(mscn)
    feats.extend([alpha, (bl + br) / 2.0])
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        shifted = np.roll(np.roll(mscn, dy, axis=0), dx, axis=1)
        alpha, bl, br = _estimate_aggd(mscn * shifted)
        eta = (br - bl) * (gamma_fn(2.0 / alpha) / gamma_fn(1.0 / alpha))
        feats.extend([alpha, eta, bl, br])
    return np.asarray(feats, dtype=np.float64)


def _image_patch_features(
    img: np.ndarray, patch_size: int, sharpness_fraction: float | None
) -> np.ndarray:
    """(num_patches, 36) features over two scales; optionally keep only the
    patches whose scale-1 sharpness exceeds the given fraction of the max."""
    luma = rgb_to_luma(validate_image(img, "image")) * 255.0
    h, w = luma.shape
    rows, cols = h // patch_size, w // patch_size
    if rows * cols < 1:
        raise DataError(
            f"image {h}x{w} yields no {patch_size}x{patch_size} patches"
        )

    per_scale = []
    sharpness = None
    for scale in (1, 2):
        if scale == 1:
            scaled = luma
        else:
            sh, sw = (h // 2) * 2, (w // 2) * 2
            scaled = luma[:sh, :sw].reshape(sh // 2, 2, sw // 2, 2).mean(axis=(1, 3))
        mscn, sigma = _mscn(scaled)
        p = patch_size // scale
        feats = np.stack(
            [
                _patch_features(mscn[r * p : (r + 1) * p, c * p : (c + 1) * p])
                for r in range(rows)
                for c in range(cols)
            ]
        )
        per_scale.append(feats)
        if scale == 1:
            sharpness = np.array(
                [
                    sigma[r * p : (r + 1) * p, c * p : (c + 1) * p].mean()
                    for r in range(rows)
                    for c in range(cols)
                ]
            )
    features = np.hstack(per_scale)
    if sharpness_fraction is not None and sharpness.max() > 0:
        keep = sharpness > sharpness_fraction * sharpness.max()
        if keep.sum() >= 2:
            features = features[keep]
    return features


def niqe_fit(
    pristine: str | Path | list[np.ndarray],
    patch_size: int = 96,
    sharpness_fraction: float = 0.75,
) -> NiqeModel:
    """Fit the pristine NSS model from a directory or list of images."""
    if isinstance(pristine, (str, Path)):
        files = sorted(
            p for p in Path(pristine).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
        images = [load_image(f, drop_alpha=True) for f in files]
    else:
        images = list(pristine)
    if len(images) < 10:
        raise DataError(f"NIQE fit needs at least 10 pristine images, got {len(images)}")
    all_feats = np.vstack(
        [_image_patch_features(img, patch_size, sharpness_fraction) for img in images]
    )
    all_feats = all_feats[np.all(np.isfinite(all_feats), axis=1)]
    if all_feats.shape[0] < 2:
        raise DataError("not enough valid pristine patches for NIQE fit")
    mean = all_feats.mean(axis=0)
    cov = np.cov(all_feats, rowvar=False)
    if not np.all(np.isfinite(cov)):
        warnings.warn("degenerate pristine covariance; regularizing with eps*I")
        cov = np.nan_to_num(cov) + 1e-6 * np.eye(cov.shape[0])
    return NiqeModel(mean=mean, cov=cov, patch_size=patch_size).validate()


def niqe_score(img: np.ndarray, model: NiqeModel) -> float:
    """Distance between the image's NSS statistics and the pristine model
    (lower is better, always >= 0)."""
    model.validate()
    feats = _image_patch_features(img, model.patch_size, sharpness_fraction=None)
    feats = feats[np.all(np.isfinite(feats), axis=1)]
    if feats.shape[0] < 2:
        raise DataError("image yields fewer than 2 valid NIQE patches")
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    pooled = (model.cov + cov) / 2.0
    inv = np.linalg.pinv(pooled)
    diff = model.mean - mean
    return float(math.sqrt(max(0.0, diff @ inv @ diff)))


# --------------------------------------------------------- deep-feature scores


class DeepFeatureAdapter:
    """Bridge a fixed torch feature extractor to numpy image metrics."""

    def __init__(self, extractor, embedding=None):
        self.extractor = extractor
        self.embedding = embedding

    def layer_features(self, img: np.ndarray) -> list[np.ndarray]:
        import torch

        from .tensorops import image_to_tensor

        with torch.no_grad():
            feats = self.extractor(image_to_tensor(img).unsqueeze(0))
        return [f[0].numpy() for f in feats]

    def embed(self, img: np.ndarray) -> np.ndarray:
        import torch

        from .tensorops import image_to_tensor

        with torch.no_grad():
            if self.embedding is not None:
                vec = self.embedding(image_to_tensor(img).unsqueeze(0))[0]
            else:
                vec = self.extractor(image_to_tensor(img).unsqueeze(0))[-1][0].mean(dim=(1, 2))
        return vec.numpy().astype(np.float64)


def lpips_like(a: np.ndarray, b: np.ndarray, adapter: DeepFeatureAdapter) -> float:
    """Perceptual distance: mean squared difference of channel-normalized
    deep features, summed over layers."""
    feats_a = adapter.layer_features(a)
    feats_b = adapter.layer_features(b)
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        na = fa / (np.linalg.norm(fa, axis=0, keepdims=True) + 1e-10)
        nb = fb / (np.linalg.norm(fb, axis=0, keepdims=True) + 1e-10)
        total += float(np.mean((na - nb) ** 2))
    return total


def fid_like(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between gaussian fits of two embedding sets (N, D)."""
    if feats_a.ndim != 2 or feats_b.ndim != 2:
        raise DataError("FID inputs must be (N, D) feature matrices")
    if feats_a.shape[0] < 2 or feats_b.shape[0] < 2:
        raise DataError("FID needs at least 2 samples per set")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    cov_a = np.cov(feats_a, rowvar=False)
    cov_b = np.cov(feats_b, rowvar=False)
    covmean, _ = linalg.sqrtm(cov_a @ cov_b, disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * covmean))
    return max(0.0, value)


# -------------------------------------------------------------- batch evaluation

METRIC_COLUMNS = ("psnr", "ssim", "lpips", "fid", "niqe")


@dataclass
class MetricReport:
    """Per-image and aggregate metric values plus explicit availability."""

    per_image: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    unavailable: list[str] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_image": self.per_image,
                "aggregates": self.aggregates,
                "unavailable": self.unavailable,
                "errors": self.errors,
                "config": self.config,
            },
            sort_keys=True,
            indent=2,
        )

    def to_table(self) -> str:
        """Aligned text table with one row per image plus the aggregate row."""
        headers = ["image"] + [c.upper() for c in METRIC_COLUMNS]
        rows = []
        for rec in self.per_image:
            rows.append(
                [rec["name"]]
                + [
                    f"{rec[c]:.4f}" if isinstance(rec.get(c), float) else "-"
                    for c in METRIC_COLUMNS
                ]
            )
        agg = ["mean"] + [
            f"{self.aggregates[c]:.4f}" if isinstance(self.aggregates.get(c), float) else "-"
            for c in METRIC_COLUMNS
        ]
        rows.append(agg)
        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
        lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
        for row in rows:
            lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
        if self.unavailable:
            lines.append("unavailable: " + ", ".join(sorted(self.unavailable)))
        if self.errors:
            lines.extend(f"error: {e}" for e in self.errors)
        return "\n".join(lines)


def _list_images(directory: Path) -> dict[str, Path]:
    return {
        p.name: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES
    }


def evaluate_dirs(
    restored_dir: str | Path,
    reference_dir: str | Path | None = None,
    niqe_model: NiqeModel | None = None,
    deep_adapter: DeepFeatureAdapter | None = None,
) -> MetricReport:
    """Score a directory of restored images, pairing with references by filename.

    PSNR/SSIM (and LPIPS/FID when a deep extractor is configured) need the
    reference directory; NIQE needs a fitted pristine model. Anything not
    computable is listed in the report's unavailable set; unpaired files are
    reported as errors, never silently skipped.
    """
    restored_dir = Path(restored_dir)
    if not restored_dir.is_dir():
        raise DataError(f"restored directory not found: {restored_dir}")
    restored = _list_images(restored_dir)
    if not restored:
        raise DataError(f"no images in {restored_dir}")

    report = MetricReport(
        config={
            "restored_dir": str(restored_dir),
            "reference_dir": str(reference_dir) if reference_dir else None,
            "niqe": niqe_model is not None,
            "deep_extractor": deep_adapter is not None,
        }
    )

    reference = None
    if reference_dir is not None:
        reference_dir = Path(reference_dir)
        if not reference_dir.is_dir():
            raise DataError(f"reference directory not found: {reference_dir}")
        reference = _list_images(reference_dir)
        for name in sorted(set(reference) - set(restored)):
            report.errors.append(f"reference {name} has no restored counterpart")
    else:
        report.unavailable.extend(["psnr", "ssim"])
    if niqe_model is None:
        report.unavailable.append("niqe")
    if deep_adapter is None:
        report.unavailable.extend(["lpips", "fid"])
    elif reference is None:
        report.unavailable.extend(["lpips", "fid"])

    restored_embeds, reference_embeds = [], []
    for name in sorted(restored):
        rec: dict = {"name": name}
        img = load_image(restored[name], drop_alpha=True)
        if reference is not None:
            if name not in reference:
                report.errors.append(f"restored {name} has no reference counterpart")
            else:
                ref = load_image(reference[name], drop_alpha=True)
                if ref.shape != img.shape:
                    report.errors.append(
                        f"{name}: shape mismatch {img.shape} vs reference {ref.shape}"
                    )
                else:
                    rec["psnr"] = psnr(img, ref)
                    rec["ssim"] = ssim(img, ref)
                    if deep_adapter is not None:
                        rec["lpips"] = lpips_like(img, ref, deep_adapter)
                        restored_embeds.append(deep_adapter.embed(img))
                        reference_embeds.append(deep_adapter.embed(ref))
        if niqe_model is not None:
            rec["niqe"] = niqe_score(img, niqe_model)
        report.per_image.append(rec)

    for column in METRIC_COLUMNS:
        values = [r[column] for r in report.per_image if isinstance(r.get(column), float)]
        if values and column != "fid":
            report.aggregates[column] = float(np.mean(values))
    if len(restored_embeds) >= 2 and len(reference_embeds) >= 2:
        report.aggregates["fid"] = fid_like(
            np.stack(restored_embeds), np.stack(reference_embeds)
        )
    return report
