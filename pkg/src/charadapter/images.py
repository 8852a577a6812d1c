"""Image tensor helpers: validation, resizing, PNG IO, grid assembly.

Images are H x W x 3 float arrays in [0, 1] on the numpy side and
(3, H, W) tensors on the torch side.

Resizing is bilinear with corner-aligned sampling, pinned exactly so any
reimplementation agrees to floating-point tolerance: output pixel ``i``
(of ``n``) samples source coordinate ``i * (src - 1) / (n - 1)`` when
``n > 1`` and the source midpoint ``(src - 1) / 2`` when ``n == 1``;
samples interpolate the two nearest source pixels linearly, per axis.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError


def validate_image(image: np.ndarray) -> np.ndarray:
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be an H x W x 3 array, got shape {getattr(image, 'shape', None)}")
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ValueError(f"image sides must be >= 8 px, got {image.shape[:2]}")
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    return image


def to_chw(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    validate_image(image)
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).to(dtype)


def from_chw(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().permute(1, 2, 0).cpu().numpy().astype(np.float32)


def _axis_coords(src: int, dst: int, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if dst == 1:
        pos = torch.full((1,), (src - 1) / 2.0, dtype=dtype)
    else:
        pos = torch.arange(dst, dtype=dtype) * ((src - 1) / (dst - 1))
    lo = pos.floor().long().clamp_(0, src - 1)
    hi = torch.clamp(lo + 1, max=src - 1)
    return lo, hi, pos - lo.to(dtype)


def resize_bilinear(chw: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Corner-aligned bilinear resize of a (..., H, W) tensor."""
    if out_h < 1 or out_w < 1:
        raise ValueError("resize target must be at least 1 x 1")
    src_h, src_w = chw.shape[-2], chw.shape[-1]
    dtype = chw.dtype if chw.is_floating_point() else torch.float32
    x = chw.to(dtype)

    lo, hi, w = _axis_coords(src_h, out_h, dtype)
    w = w.view(-1, 1)
    x = x.index_select(-2, lo) * (1 - w) + x.index_select(-2, hi) * w

    lo, hi, w = _axis_coords(src_w, out_w, dtype)
    x = x.index_select(-1, lo) * (1 - w) + x.index_select(-1, hi) * w
    return x


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return from_chw(resize_bilinear(to_chw(image), out_h, out_w))


def save_png(image: np.ndarray, path: str | Path) -> None:
    validate_image(image)
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantized, mode="RGB").save(path)


def load_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return validate_image(arr)


def image_grid(rows: list[list[np.ndarray]], pad: int = 2, pad_value: float = 1.0) -> np.ndarray:
    """Assemble images (all the same size) into one padded grid image."""
    if not rows or not rows[0]:
        raise ValueError("image grid needs at least one image")
    h, w, _ = rows[0][0].shape
    n_cols = max(len(r) for r in rows)
    grid = np.full(
        (len(rows) * (h + pad) + pad, n_cols * (w + pad) + pad, 3), pad_value, dtype=np.float32
    )
    for i, row in enumerate(rows):
        for j, image in enumerate(row):
            if image.shape != (h, w, 3):
                raise ValueError("all grid images must share one shape")
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[y : y + h, x : x + w] = image
    return grid
