"""Deterministic image preprocessing producing backbone-ready tensors.

Images are float32 channel-last arrays in [0, 1] before pixel normalization.
All operations are pure: the same input bytes give the same output bytes, and
callers may parallelize freely across images. Bilinear resampling uses
half-pixel centers and no antialiasing filter, which keeps results identical
across runs regardless of scale factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ImageError

# ITU-R BT.601 luma coefficients.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class PixelNormalization:
    """Per-channel mean/std applied after decoding to [0, 1] floats."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def validate(self) -> None:
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ImageError("pixel normalization needs 3 mean and 3 std components")
        if any(s <= 0 for s in self.std):
            raise ImageError(f"pixel std components must be > 0, got {self.std}")


IDENTITY_NORMALIZATION = PixelNormalization(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
IMAGENET_NORMALIZATION = PixelNormalization(mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit PNG/JPEG/TIFF file to a (H, W, 3) float32 array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32)
    except FileNotFoundError as e:
        raise ImageError(f"image file not found: {path}") from e
    except Exception as e:
        raise ImageError(f"failed to decode image {path}: {e}") from e
    return arr / np.float32(255.0)


def _check_image(img: np.ndarray, name: str = "image") -> None:
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageError(f"{name} must have shape (H, W, 1|3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ImageError(f"{name} contains non-finite values")


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luma, replicated into all 3 channels (backbones expect 3).

    Idempotent up to float rounding since the luma weights sum to 1.
    """
    _check_image(img)
    if img.shape[2] != 3:
        raise ImageError(f"to_grayscale expects a 3-channel image, got {img.shape[2]} channel(s)")
    w = np.asarray(LUMA_WEIGHTS, dtype=img.dtype)
    luma = img @ w
    return np.repeat(luma[:, :, None], 3, axis=2)


def resize(img: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize to target x target with half-pixel centers.

    Identity when the input is already target x target. Output values stay
    within the input's [min, max] range (bilinear convexity).
    """
    _check_image(img)
    if target <= 0:
        raise ImageError(f"resize target must be positive, got {target}")
    h, w, c = img.shape
    if h == target and w == target:
        return img.copy()

    src = img.astype(np.float64, copy=False)

    def axis_coords(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
        x = np.clip(x, 0.0, n_src - 1.0)
        lo = np.floor(x).astype(np.intp)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, x - lo

    y0, y1, fy = axis_coords(h, target)
    x0, x1, fx = axis_coords(w, target)

    top = src[y0][:, x0] * (1.0 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1.0 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    out = top * (1.0 - fy)[:, None, None] + bot * fy[:, None, None]
    return out.astype(img.dtype, copy=False)


def pad_then_scale(img: np.ndarray, target: int, fill: float = 1.0) -> np.ndarray:
    """Integer-factor bilinear upscale, then centered constant padding.

    The scale factor is floor(target / source); the remainder is padded with
    ``fill``, split symmetrically with any odd pixel going right/bottom.
    Requires a square source no larger than the target. Padding happens on
    raw [0, 1] pixels, before pixel normalization; the default fill of 1.0 is
    white, which matches bright-field histology background.
    """
    _check_image(img)
    h, w, _ = img.shape
    if h != w:
        raise ImageError(f"pad_then_scale expects a square source, got {h}x{w}")
    if target <= 0:
        raise ImageError(f"pad_then_scale target must be positive, got {target}")
    if h > target:
        raise ImageError(f"source size {h} exceeds target {target}")

    factor = target // h
    scaled = resize(img, h * factor) if factor > 1 else img
    pad_total = target - scaled.shape[0]
    before = pad_total // 2
    after = pad_total - before
    if pad_total == 0:
        return scaled.copy() if scaled is img else scaled
    return np.pad(
        scaled,
        ((before, after), (before, after), (0, 0)),
        mode="constant",
        constant_values=np.asarray(fill, dtype=img.dtype),
    )


def normalize_pixels(img: np.ndarray, norm: PixelNormalization) -> np.ndarray:
    """Standardize channels: out[c] = (in[c] - mean[c]) / std[c]."""
    _check_image(img)
    if img.shape[2] != 3:
        raise ImageError(f"normalize_pixels expects a 3-channel image, got {img.shape[2]}")
    norm.validate()
    mean = np.asarray(norm.mean, dtype=img.dtype)
    std = np.asarray(norm.std, dtype=img.dtype)
    return (img - mean) / std
