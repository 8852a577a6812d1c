import numpy as np
import pytest
import torch

from charadapter.errors import DataError
from charadapter.images import (
    image_grid,
    load_png,
    resize_bilinear,
    resize_image,
    save_png,
    to_chw,
    validate_image,
)


def test_validate_rejects_bad_shapes():
    with pytest.raises(ValueError, match="H x W x 3"):
        validate_image(np.zeros((8, 8)))
    with pytest.raises(ValueError, match=">= 8 px"):
        validate_image(np.zeros((4, 8, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="non-finite"):
        validate_image(np.full((8, 8, 3), np.nan, dtype=np.float32))


def test_resize_identity():
    x = torch.rand(3, 16, 16)
    assert torch.equal(resize_bilinear(x, 16, 16), x)


def test_resize_corner_alignment():
    # corner pixels must be preserved exactly under corner-aligned sampling
    x = torch.zeros(1, 4, 4)
    x[0, 0, 0], x[0, 0, 3], x[0, 3, 0], x[0, 3, 3] = 1.0, 2.0, 3.0, 4.0
    up = resize_bilinear(x, 7, 7)
    assert up[0, 0, 0] == 1.0 and up[0, 0, 6] == 2.0
    assert up[0, 6, 0] == 3.0 and up[0, 6, 6] == 4.0


def test_resize_linear_ramp_exact():
    # bilinear resize reproduces a linear ramp exactly at any size
    ramp = torch.arange(8, dtype=torch.float32).expand(8, 8).unsqueeze(0)
    up = resize_bilinear(ramp, 8, 15)
    expected = torch.arange(15, dtype=torch.float32) * (7.0 / 14.0)
    assert torch.allclose(up[0, 0], expected, atol=1e-6)


def test_resize_single_pixel_output():
    x = torch.arange(9, dtype=torch.float32).reshape(1, 3, 3)
    out = resize_bilinear(x, 1, 1)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == x[0, 1, 1]  # source midpoint


def test_png_roundtrip_quantized(tmp_path, sample_image):
    path = tmp_path / "img.png"
    save_png(sample_image, path)
    loaded = load_png(path)
    assert loaded.shape == sample_image.shape
    assert np.abs(loaded - sample_image).max() <= 0.5 / 255.0 + 1e-6


def test_png_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_png(tmp_path / "missing.png")


def test_image_grid_layout():
    a = np.zeros((8, 8, 3), dtype=np.float32)
    b = np.ones((8, 8, 3), dtype=np.float32)
    grid = image_grid([[a, b], [b, a]], pad=2)
    assert grid.shape == (2 * 10 + 2, 2 * 10 + 2, 3)
    assert grid[2, 2, 0] == 0.0 and grid[2, 12, 0] == 1.0


def test_image_grid_rejects_mixed_sizes():
    with pytest.raises(ValueError, match="share one shape"):
        image_grid([[np.zeros((8, 8, 3), dtype=np.float32), np.zeros((16, 16, 3), dtype=np.float32)]])


def test_resize_image_numpy_path(sample_image):
    small = resize_image(sample_image, 32, 32)
    assert small.shape == (32, 32, 3)
    assert small.dtype == np.float32


def test_to_chw_dtype(sample_image):
    chw = to_chw(sample_image, torch.float64)
    assert chw.shape == (3, 64, 64)
    assert chw.dtype == torch.float64
