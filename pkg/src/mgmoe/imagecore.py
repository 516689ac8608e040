"""Image arrays, quality metrics and 8-bit PNG I/O.

An image is a float64 array of shape (H, W, 3) with values in [0, 1].
Public operations clip their outputs back into that range.
"""
from __future__ import annotations

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

MIN_SIZE = 8
PSNR_CAP = 99.0

# SSIM stabilizers for data range 1
_K1, _K2 = 0.01, 0.03
_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5  # radius int(3.5 * 1.5 + 0.5) = 5 -> 11x11 window


class ImageError(ValueError):
    pass


def as_image(data, min_size: int = MIN_SIZE) -> np.ndarray:
    """Validate and copy `data` into a clipped float64 (H, W, 3) array."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"expected (H, W, 3) array, got shape {arr.shape}")
    h, w, _ = arr.shape
    if h < min_size or w < min_size:
        raise ImageError(f"image {h}x{w} is smaller than {min_size}x{min_size}")
    if not np.all(np.isfinite(arr)):
        raise ImageError("image contains non-finite values")
    return np.clip(arr, 0.0, 1.0)


def constant(height: int, width: int, value) -> np.ndarray:
    return as_image(np.broadcast_to(np.asarray(value, dtype=np.float64), (height, width, 3)))


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ImageError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB over all pixel-channels; identical inputs give PSNR_CAP."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def _gauss(x):
    return ndimage.gaussian_filter(x, sigma=_SSIM_SIGMA, truncate=_SSIM_TRUNCATE, mode="reflect")


def ssim(a, b) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Window statistics use population covariance and the mean is taken over
    positions where the window lies fully inside the image.
    """
    a, b = _check_pair(a, b)
    c1 = (_K1 * 1.0) ** 2
    c2 = (_K2 * 1.0) ** 2
    pad = 5
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _gauss(x), _gauss(y)
        vx = _gauss(x * x) - mx * mx
        vy = _gauss(y * y) - my * my
        cov = _gauss(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        smap = num / den
        if smap.shape[0] > 2 * pad and smap.shape[1] > 2 * pad:
            smap = smap[pad:-pad, pad:-pad]
        vals.append(smap.mean())
    return float(np.mean(vals))


def to_uint8(img) -> np.ndarray:
    """Round-half-up quantization to 8 bits."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_uint8(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def save_png(img, path) -> None:
    img = as_image(img)
    PILImage.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.format != "PNG":
            raise ImageError(f"{path}: not a PNG file")
        if im.mode != "RGB":
            raise ImageError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        arr = np.asarray(im)
    return as_image(from_uint8(arr))


def center_crop(img, size: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Square center crop; returns the crop and its (x, y, size) box."""
    h, w = img.shape[:2]
    if size > h or size > w:
        raise ImageError(f"crop {size} larger than image {h}x{w}")
    y0 = (h - size) // 2
    x0 = (w - size) // 2
    return img[y0:y0 + size, x0:x0 + size], (x0, y0, size)
