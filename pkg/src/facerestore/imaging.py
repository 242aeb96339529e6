"""Image tensors, file IO, and resampling primitives.

An image is a float numpy array of shape (H, W, C) with C in {1, 3} and
values nominally in [0, 1]. Quantization to 8 bits happens only at file
boundaries. All functions are pure: inputs are never modified.
"""

from __future__ import annotations

import io
import warnings
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

__all__ = [
    "validate_image",
    "validate_feature_map",
    "load_image",
    "save_image",
    "resize",
    "resample_matrix",
    "rgb_to_luma",
    "jpeg_roundtrip",
]

RESIZE_METHODS = ("bicubic", "bilinear", "nearest")


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Check the (H, W, C) image contract and return the array unchanged."""
    if not isinstance(img, np.ndarray):
        raise DataError(f"{name}: expected numpy array, got {type(img).__name__}")
    if img.ndim != 3:
        raise DataError(f"{name}: expected 3 dims (H, W, C), got shape {img.shape}")
    h, w, c = img.shape
    if h < 1 or w < 1:
        raise DataError(f"{name}: degenerate spatial size {h}x{w}")
    if c not in (1, 3):
        raise DataError(f"{name}: channels must be 1 or 3, got {c}")
    if not np.issubdtype(img.dtype, np.floating):
        raise DataError(f"{name}: expected float dtype, got {img.dtype}")
    if not np.all(np.isfinite(img)):
        raise DataError(f"{name}: contains non-finite values")
    return img


def validate_feature_map(fmap: np.ndarray, name: str = "feature map") -> np.ndarray:
    """Check the (H, W, C) feature-map contract (any channel count, finite)."""
    if not isinstance(fmap, np.ndarray) or fmap.ndim != 3:
        raise DataError(f"{name}: expected (H, W, C) array")
    if fmap.shape[2] < 1:
        raise DataError(f"{name}: needs at least one channel")
    if not np.all(np.isfinite(fmap)):
        raise DataError(f"{name}: contains non-finite values")
    return fmap


def load_image(path: str | Path, drop_alpha: bool = False) -> np.ndarray:
    """Load a PNG or JPEG file as a float64 (H, W, C) array in [0, 1].

    Grayscale files yield C=1, color files C=3 (RGB order). Alpha channels
    are rejected unless drop_alpha is set, in which case they are composited
    away by conversion to RGB.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            if mode in ("RGBA", "LA"):
                if not drop_alpha:
                    raise DataError(
                        f"{path}: alpha channel present (mode {mode}); "
                        "pass drop_alpha=True to discard it"
                    )
                im = im.convert("RGB")
                mode = "RGB"
            if mode not in ("L", "RGB"):
                raise DataError(f"{path}: unsupported image mode {mode}")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except DataError:
        raise
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return validate_image(arr, str(path))


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def save_image(
    img: np.ndarray,
    path: str | Path,
    format: str | None = None,
    quality: int | None = None,
) -> None:
    """Write an image as 8-bit PNG or JPEG.

    format defaults to the path suffix. quality applies to JPEG only
    (1..100); supplying it for PNG is ignored with a warning.
    """
    validate_image(img, "image")
    path = Path(path)
    if format is None:
        suffix = path.suffix.lower()
        format = {"jpg": "jpeg", "jpeg": "jpeg", "png": "png"}.get(suffix.lstrip("."), "")
    format = format.lower()
    if format not in ("png", "jpeg"):
        raise DataError(f"unsupported save format {format!r} for {path}")
    if not path.parent.is_dir():
        raise DataError(f"parent directory does not exist: {path.parent}")

    data = _quantize(img)
    pil = Image.fromarray(data[:, :, 0] if data.shape[2] == 1 else data)
    try:
        if format == "png":
            if quality is not None:
                warnings.warn("quality is ignored for PNG output", stacklevel=2)
            pil.save(path, format="PNG")
        else:
            if quality is None:
                quality = 95
            if not 1 <= quality <= 100:
                raise DataError(f"jpeg quality must be in 1..100, got {quality}")
            pil.save(path, format="JPEG", quality=int(quality))
    except OSError as exc:
        raise DataError(f"cannot write image {path}: {exc}") from exc


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Encode to JPEG bytes in memory at the given quality and decode back."""
    validate_image(img, "image")
    if not 1 <= quality <= 100:
        raise DataError(f"jpeg quality must be in 1..100, got {quality}")
    data = _quantize(img)
    pil = Image.fromarray(data[:, :, 0] if data.shape[2] == 1 else data)
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as back:
        out = np.asarray(back, dtype=np.float64) / 255.0
    if out.ndim == 2:
        out = out[:, :, None]
    return out


def _cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel with parameter a (support 2)."""
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    out[near] = (a + 2.0) * t[near] ** 3 - (a + 3.0) * t[near] ** 2 + 1.0
    out[far] = a * (t[far] ** 3 - 5.0 * t[far] ** 2 + 8.0 * t[far] - 4.0)
    return out


def _linear_kernel(t: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(t))


def resample_matrix(in_size: int, out_size: int, method: str) -> np.ndarray:
    """Build the (out_size, in_size) row-stochastic 1-D resampling matrix.

    Pixel centers are aligned (src = (dst + 0.5) * in/out - 0.5). When
    downsampling, the kernel is stretched by the scale factor so it acts as
    an antialiasing prefilter. Out-of-range taps are clamped to the edge
    pixels, and each row is renormalized to sum to one, so constant signals
    are preserved exactly.
    """
    if in_size < 1 or out_size < 1:
        raise DataError(f"resample sizes must be >= 1, got {in_size} -> {out_size}")
    if method not in RESIZE_METHODS:
        raise DataError(f"unknown resize method {method!r}, expected one of {RESIZE_METHODS}")

    mat = np.zeros((out_size, in_size), dtype=np.float64)
    ratio = in_size / out_size

    if method == "nearest":
        src = np.minimum((np.floor((np.arange(out_size) + 0.5) * ratio)).astype(int), in_size - 1)
        mat[np.arange(out_size), src] = 1.0
        return mat

    kernel = _cubic_kernel if method == "bicubic" else _linear_kernel
    support = 2.0 if method == "bicubic" else 1.0
    fscale = max(1.0, ratio)
    support = support * fscale

    for o in range(out_size):
        center = (o + 0.5) * ratio - 0.5
        left = int(np.floor(center - support)) + 1
        right = int(np.floor(center + support))
        taps = np.arange(left, right + 1)
        weights = kernel((taps - center) / fscale)
        taps = np.clip(taps, 0, in_size - 1)
        total = weights.sum()
        if total <= 0:
            raise DataError(f"degenerate resample row at {o}")
        np.add.at(mat[o], taps, weights / total)
    return mat


def resize(img: np.ndarray, out_h: int, out_w: int, method: str = "bicubic") -> np.ndarray:
    """Resize an image to (out_h, out_w), clamping the result to [0, 1].

    Separable resampling; the same matrices drive the torch-side resizer
    used during training, so the two paths agree exactly.
    """
    validate_image(img, "image")
    if out_h < 1 or out_w < 1:
        raise DataError(f"target size must be positive, got {out_h}x{out_w}")
    if method not in RESIZE_METHODS:
        raise DataError(f"unknown resize method {method!r}")
    h, w, _ = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    mat_h = resample_matrix(h, out_h, method)
    mat_w = resample_matrix(w, out_w, method)
    tmp = np.tensordot(mat_h, img.astype(np.float64, copy=False), (1, 0))
    out = np.tensordot(mat_w, tmp, (1, 1)).transpose(1, 0, 2)
    return np.clip(out, 0.0, 1.0)


def rgb_to_luma(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of an image as an (H, W) array; grayscale passes through."""
    validate_image(img, "image")
    if img.shape[2] == 1:
        return img[:, :, 0].astype(np.float64, copy=True)
    r, g, b = img[:, :, 0], img[:, :, 1], img[:, :, 2]
    return 0.299 * r + 0.587 * g + 0.114 * b
