"""Image preprocessing: decode, grayscale, bilinear resize, pad-then-scale."""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from dfl.errors import ImageError
from dfl.imageprep import (
    IDENTITY_NORMALIZATION,
    IMAGENET_NORMALIZATION,
    PixelNormalization,
    load_image,
    normalize_pixels,
    pad_then_scale,
    resize,
    to_grayscale,
)


def oracle_bilinear(img: np.ndarray, target: int) -> np.ndarray:
    """Per-pixel brute-force bilinear resize with half-pixel centers."""
    h, w, c = img.shape
    out = np.zeros((target, target, c))
    for yy in range(target):
        for xx in range(target):
            sy = min(max((yy + 0.5) * h / target - 0.5, 0.0), h - 1.0)
            sx = min(max((xx + 0.5) * w / target - 0.5, 0.0), w - 1.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            for k in range(c):
                top = img[y0, x0, k] * (1 - fx) + img[y0, x1, k] * fx
                bot = img[y1, x0, k] * (1 - fx) + img[y1, x1, k] * fx
                out[yy, xx, k] = top * (1 - fy) + bot * fy
    return out


def rand_img(rng, h, w, c=3):
    return rng.uniform(size=(h, w, c)).astype(np.float32)


def test_load_image_decodes_to_unit_floats(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(10, 12, 3), dtype=np.uint8)
    for ext in ("png", "jpg", "tiff"):
        p = tmp_path / f"img.{ext}"
        Image.fromarray(arr, mode="RGB").save(p)
        out = load_image(p)
        assert out.shape == (10, 12, 3)
        assert out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0
    # png and tiff are lossless: exact 1/255 quantization round trip
    assert np.array_equal(load_image(tmp_path / "img.png"), arr.astype(np.float32) / 255.0)


def test_load_image_errors(tmp_path):
    with pytest.raises(ImageError, match="not found"):
        load_image(tmp_path / "missing.png")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(ImageError, match="decode"):
        load_image(bad)


def test_to_grayscale_luma_values():
    red = np.zeros((1, 1, 3), dtype=np.float32)
    red[0, 0, 0] = 1.0
    assert np.allclose(to_grayscale(red)[0, 0], [0.299, 0.299, 0.299], atol=1e-7)
    green = np.zeros((1, 1, 3), dtype=np.float32)
    green[0, 0, 1] = 1.0
    assert np.allclose(to_grayscale(green)[0, 0], [0.587, 0.587, 0.587], atol=1e-7)
    gray = np.full((2, 2, 3), 0.42, dtype=np.float32)
    assert np.allclose(to_grayscale(gray), gray, atol=1e-6)


def test_to_grayscale_idempotent():
    rng = np.random.default_rng(1)
    img = rand_img(rng, 16, 16)
    once = to_grayscale(img)
    twice = to_grayscale(once)
    assert np.allclose(once, twice, atol=1e-6)
    assert once.shape == img.shape


def test_to_grayscale_rejects_single_channel():
    with pytest.raises(ImageError, match="3-channel"):
        to_grayscale(np.zeros((4, 4, 1), dtype=np.float32))


def test_resize_identity_is_bitwise():
    rng = np.random.default_rng(2)
    img = rand_img(rng, 256, 256)
    out = resize(img, 256)
    assert np.array_equal(out, img)
    assert out is not img


def test_resize_constant_image_stays_constant():
    for target in (3, 17, 64, 101):
        img = np.full((50, 50, 3), 0.37, dtype=np.float32)
        out = resize(img, target)
        assert out.shape == (target, target, 3)
        assert np.allclose(out, 0.37, atol=1e-6)


def test_resize_checkerboard_upsample_against_oracle():
    img = np.zeros((2, 2, 1))
    img[0, 1, 0] = 1.0
    img[1, 0, 0] = 1.0
    out = resize(img, 4)
    expected = oracle_bilinear(img, 4)
    assert np.allclose(out, expected, atol=1e-12)
    # interior pixels are strict convex combinations
    assert np.all(out >= 0.0) and np.all(out <= 1.0)
    assert np.any((out > 0.0) & (out < 1.0))


def test_resize_matches_oracle_random_sizes():
    rng = np.random.default_rng(3)
    for _ in range(12):
        h = int(rng.integers(2, 24))
        w = int(rng.integers(2, 24))
        target = int(rng.integers(2, 32))
        img = rng.uniform(size=(h, w, 3))
        assert np.allclose(resize(img, target), oracle_bilinear(img, target), atol=1e-12)


def test_resize_preserves_value_range():
    rng = np.random.default_rng(4)
    for _ in range(20):
        img = rand_img(rng, int(rng.integers(2, 40)), int(rng.integers(2, 40)))
        out = resize(img, int(rng.integers(2, 50)))
        assert out.min() >= img.min() - 1e-6
        assert out.max() <= img.max() + 1e-6


def test_resize_rejects_bad_target():
    with pytest.raises(ImageError):
        resize(np.zeros((4, 4, 3), dtype=np.float32), 0)


def test_pad_then_scale_50_to_256():
    img = np.full((50, 50, 3), 0.2, dtype=np.float32)
    out = pad_then_scale(img, 256, fill=1.0)
    assert out.shape == (256, 256, 3)
    # x5 scale gives 250x250 content, 3 pad on every side
    assert np.allclose(out[3:253, 3:253], 0.2, atol=1e-6)
    assert np.all(out[:3] == 1.0) and np.all(out[-3:] == 1.0)
    assert np.all(out[:, :3] == 1.0) and np.all(out[:, -3:] == 1.0)


def test_pad_then_scale_identity_at_target():
    rng = np.random.default_rng(5)
    img = rand_img(rng, 256, 256)
    assert np.array_equal(pad_then_scale(img, 256), img)


def test_pad_then_scale_exact_double():
    img = np.full((128, 128, 3), 0.6, dtype=np.float32)
    out = pad_then_scale(img, 256, fill=0.0)
    assert out.shape == (256, 256, 3)
    # exact integer factor: no padding at all
    assert np.allclose(out, 0.6, atol=1e-6)


def test_pad_then_scale_odd_remainder_goes_right_bottom():
    img = np.full((51, 51, 3), 0.5, dtype=np.float32)
    out = pad_then_scale(img, 256, fill=0.0)
    # factor 5 gives 255; 1 leftover pads bottom/right only
    assert np.all(out[255, :, :] == 0.0)
    assert np.all(out[:, 255, :] == 0.0)
    assert not np.any(out[0, :128, :] == 0.0)


def test_pad_then_scale_always_target_square():
    rng = np.random.default_rng(6)
    for _ in range(20):
        src = int(rng.integers(1, 64))
        target = int(rng.integers(src, 128))
        out = pad_then_scale(rand_img(rng, src, src), target)
        assert out.shape == (target, target, 3)


def test_pad_then_scale_errors():
    with pytest.raises(ImageError, match="square"):
        pad_then_scale(np.zeros((4, 5, 3), dtype=np.float32), 8)
    with pytest.raises(ImageError, match="exceeds"):
        pad_then_scale(np.zeros((10, 10, 3), dtype=np.float32), 8)


def test_normalize_pixels():
    img = np.full((2, 2, 3), 0.5, dtype=np.float32)
    assert np.array_equal(normalize_pixels(img, IDENTITY_NORMALIZATION), img)
    out = normalize_pixels(img, PixelNormalization(mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)))
    assert np.allclose(out, 0.0)
    ones = np.ones((1, 1, 3), dtype=np.float32)
    out = normalize_pixels(ones, IMAGENET_NORMALIZATION)
    assert out[0, 0, 0] == pytest.approx((1.0 - 0.485) / 0.229, abs=1e-6)
    assert out[0, 0, 0] == pytest.approx(2.2489, abs=1e-4)


def test_normalize_pixels_validates_std():
    with pytest.raises(ImageError, match="std"):
        normalize_pixels(
            np.zeros((1, 1, 3), dtype=np.float32),
            PixelNormalization(mean=(0, 0, 0), std=(1.0, 0.0, 1.0)),
        )


def test_operations_are_pure():
    rng = np.random.default_rng(7)
    img = rand_img(rng, 30, 30)
    snapshot = img.copy()
    to_grayscale(img)
    resize(img, 17)
    pad_then_scale(img, 64)
    normalize_pixels(img, IMAGENET_NORMALIZATION)
    assert np.array_equal(img, snapshot)
