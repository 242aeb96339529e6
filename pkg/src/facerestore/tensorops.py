"""Bridging helpers between (H, W, C) numpy images and torch NCHW tensors.

resize_tensor applies the same separable resampling matrices as
imaging.resize, expressed as matmuls so it stays differentiable and the
numpy and torch paths produce matching values.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch

from .errors import DataError
from .imaging import resample_matrix

__all__ = ["image_to_tensor", "tensor_to_image", "resize_tensor", "crop_resize_tensor"]


def image_to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, C) numpy image -> (C, H, W) torch tensor."""
    if img.ndim != 3:
        raise DataError(f"expected (H, W, C) array, got shape {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype)


def tensor_to_image(t: torch.Tensor, clamp: bool = True) -> np.ndarray:
    """(C, H, W) or (1, C, H, W) tensor -> (H, W, C) float64 numpy image."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise DataError(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    arr = t.detach().cpu().double().numpy().transpose(1, 2, 0)
    if clamp:
        arr = np.clip(arr, 0.0, 1.0)
    return arr


@lru_cache(maxsize=256)
def _matrix(in_size: int, out_size: int, method: str, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(resample_matrix(in_size, out_size, method)).to(dtype)


def resize_tensor(x: torch.Tensor, out_h: int, out_w: int, method: str = "bicubic") -> torch.Tensor:
    """Resize an NCHW (or CHW) tensor. Differentiable; no value clamping."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise DataError(f"expected NCHW tensor, got shape {tuple(x.shape)}")
    _, _, h, w = x.shape
    if (h, w) != (out_h, out_w):
        mat_h = _matrix(h, out_h, method, x.dtype).to(x.device)
        mat_w = _matrix(w, out_w, method, x.dtype).to(x.device)
        x = torch.einsum("oh,nchw->ncow", mat_h, x)
        x = torch.einsum("pw,ncow->ncop", mat_w, x)
    return x.squeeze(0) if squeeze else x


def crop_resize_tensor(
    x: torch.Tensor, box: tuple[int, int, int, int], out_size: int, method: str = "bilinear"
) -> torch.Tensor:
    """Crop an NCHW tensor to box=(x0, y0, w, h) and resize to out_size square."""
    x0, y0, w, h = box
    if w < 1 or h < 1:
        raise DataError(f"degenerate crop box {box}")
    patch = x[..., y0 : y0 + h, x0 : x0 + w]
    return resize_tensor(patch, out_size, out_size, method)
