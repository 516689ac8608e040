"""Handcrafted degradation representation (DR) over the center crop of an image.

Each component is a raw statistic that is 0 on a constant image where that
makes sense (energies are log1p-compressed), followed by a corpus-wide
standardizer fitted once on the training set.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.fft import dctn

from .imagecore import ImageError, center_crop

DR_DIM = 32
MIN_EXTRACT_SIZE = 32
MAX_CROP = 128
SCALE_FLOOR = 1e-6

FEATURE_NAMES = (
    "hf_energy", "mad_residual", "hf_chroma",
    "grad_mean", "grad_kurtosis", "sharp_ratio", "grad_p90",
    "dark_mean", "dark_std", "contrast", "saturation", "lum_p1",
    "lum_mean", "lum_p5", "lum_p50", "lum_p95", "illum_mean",
    "streak_m45", "streak_0", "streak_p45", "streak_90", "residual_skew",
    "bright_spots", "white_frac",
    "blockiness", "dct_zero_frac",
    "chroma_spread", "laplace_var", "mid_energy", "fine_coarse_ratio",
    "chroma_mean", "residual_pos_frac",
)
assert len(FEATURE_NAMES) == DR_DIM

NOISE_COMPONENT = FEATURE_NAMES.index("mad_residual")
# designated proxy per degradation kind (raw score, monotone in severity)
PROXY_COMPONENT = {
    "noise": FEATURE_NAMES.index("mad_residual"),
    "blur": FEATURE_NAMES.index("grad_mean"),
    "haze": FEATURE_NAMES.index("dark_mean"),
    "lowlight": FEATURE_NAMES.index("lum_mean"),
    "rain": FEATURE_NAMES.index("residual_skew"),
    "snow": FEATURE_NAMES.index("bright_spots"),
    "jpeg": FEATURE_NAMES.index("blockiness"),
}
# direction of the proxy's response to increasing severity
PROXY_SIGN = {"noise": 1, "blur": -1, "haze": 1, "lowlight": -1, "rain": 1, "snow": 1, "jpeg": 1}

_LAPLACE = np.array([[1, -2, 1], [-2, 4, -2], [1, -2, 1]], dtype=np.float64)


@dataclass(frozen=True)
class DRVector:
    values: np.ndarray
    source_crop: tuple[int, int, int]


def _energy(x: float, scale: float) -> float:
    return float(np.log1p(x / scale))


def _kurtosis(v: np.ndarray) -> float:
    var = v.var()
    if var < 1e-20:
        return 0.0
    return float(np.mean((v - v.mean()) ** 4) / var ** 2 - 3.0)


def _skew(v: np.ndarray) -> float:
    sd = v.std()
    if sd < 1e-10:
        return 0.0
    return float(np.mean((v - v.mean()) ** 3) / sd ** 3)


def _directional_energy(res: np.ndarray, angle_deg: float, length: int = 9) -> float:
    t = np.deg2rad(angle_deg)
    k = np.zeros((length, length))
    r = length // 2
    for s in np.linspace(-r, r, 4 * length):
        y = int(round(r - s * np.sin(t)))
        x = int(round(r + s * np.cos(t)))
        k[y, x] = 1.0
    k /= k.sum()
    sm = ndimage.convolve(res, k, mode="mirror")
    return float(np.mean(sm * sm))


def _blockiness(lum: np.ndarray) -> float:
    h, w = lum.shape
    dx = np.abs(np.diff(lum, axis=1))
    dy = np.abs(np.diff(lum, axis=0))
    bx = (np.arange(w - 1) % 8) == 7
    by = (np.arange(h - 1) % 8) == 7
    across = np.concatenate([dx[:, bx].ravel(), dy[by, :].ravel()])
    inside = np.concatenate([dx[:, ~bx].ravel(), dy[~by, :].ravel()])
    if across.size == 0 or inside.mean() < 1e-12:
        return 0.0
    return float(np.log((across.mean() + 1e-4) / (inside.mean() + 1e-4)))


def _dct_zero_fraction(lum: np.ndarray) -> float:
    h, w = lum.shape
    h8, w8 = h - h % 8, w - w % 8
    blocks = (lum[:h8, :w8] * 255.0).reshape(h8 // 8, 8, w8 // 8, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    hi = np.add.outer(np.arange(8), np.arange(8)) >= 6
    return float(np.mean(np.abs(coef[..., hi]) < 0.5))


def raw_descriptor(crop: np.ndarray) -> np.ndarray:
    lum = crop.mean(axis=2)
    gray_const = lum.std() < 1e-12

    lap = ndimage.convolve(lum, _LAPLACE, mode="mirror")[1:-1, 1:-1]
    hf_energy = _energy(np.sqrt(np.mean(lap ** 2)) / 6.0, 0.01)
    mad = _energy(np.median(np.abs(lap)) / 6.0 * 1.4826, 0.01)
    chroma = crop[..., 0] - crop[..., 1]
    lap_c = ndimage.convolve(chroma, _LAPLACE, mode="mirror")[1:-1, 1:-1]
    hf_chroma = _energy(np.median(np.abs(lap_c)) / 6.0 * 1.4826, 0.01)

    gy, gx = np.gradient(lum)
    gmag = np.hypot(gx, gy)
    smooth = ndimage.gaussian_filter(lum, 2.0, mode="mirror")
    sgy, sgx = np.gradient(smooth)
    smag = np.hypot(sgx, sgy)
    grad_mean = _energy(gmag.mean(), 0.01)
    grad_kurt = float(np.sign(k := _kurtosis(gmag)) * np.log1p(abs(k)))
    sharp_ratio = 0.0 if gray_const else float(np.log((gmag.mean() + 1e-4) / (smag.mean() + 1e-4)))
    grad_p90 = _energy(np.percentile(gmag, 90), 0.01)

    dark = ndimage.minimum_filter(crop.min(axis=2), size=7, mode="mirror")
    dark_mean = float(dark.mean())
    dark_std = float(dark.std())
    contrast = float(lum.std())
    mx, mn = crop.max(axis=2), crop.min(axis=2)
    saturation = float(np.mean((mx - mn) / np.maximum(mx, 1e-3)))
    p1, p5, p50, p95 = np.percentile(lum, [1, 5, 50, 95])

    res = lum - smooth
    dirs = [_directional_energy(res, a) for a in (-45.0, 0.0, 45.0, 90.0)]
    total = float(np.mean(res * res))
    streaks = [0.0 if total < 1e-14 else float(np.log1p(d / (total + 1e-6) * 4)) for d in dirs]
    res_skew = float(np.sign(s := _skew(res)) * np.log1p(abs(s)))
    local = ndimage.gaussian_filter(lum, 1.5, mode="mirror")
    bright_spots = float(np.mean((lum - ndimage.median_filter(lum, 5, mode="mirror") > 0.08) & (lum > 0.6)))
    white_frac = float(np.mean(mn > 0.85))

    chans = crop.reshape(-1, 3).mean(axis=0)
    chroma_spread = float(chans.max() - chans.min())
    laplace_var = _energy(lap.var(), 1e-4)
    mid = ndimage.gaussian_filter(lum, 1.0, mode="mirror") - smooth
    mid_energy = 0.0 if gray_const else _energy(np.sqrt(np.mean(mid ** 2)), 0.01)
    fine = lum - local
    fine_coarse = 0.0 if gray_const else float(np.log((np.sqrt(np.mean(fine ** 2)) + 1e-4)
                                                      / (np.sqrt(np.mean(mid ** 2)) + 1e-4)))
    res_pos = 0.0 if gray_const else float(np.mean(res > 0.02))

    return np.array([
        hf_energy, mad, hf_chroma,
        grad_mean, grad_kurt, sharp_ratio, grad_p90,
        dark_mean, dark_std, contrast, saturation, p1,
        float(lum.mean()), p5, p50, p95, float(mx.mean()),
        *streaks, res_skew,
        bright_spots, white_frac,
        _blockiness(lum), _dct_zero_fraction(lum),
        chroma_spread, laplace_var, mid_energy, fine_coarse,
        float(np.mean(mx - mn)), res_pos,
    ], dtype=np.float64)


def extract_raw(img) -> DRVector:
    """Raw (unstandardized) descriptor over the center crop of size min(H, W, 128)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"expected (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    if h < MIN_EXTRACT_SIZE or w < MIN_EXTRACT_SIZE:
        raise ImageError(f"image {h}x{w} too small for extraction (min {MIN_EXTRACT_SIZE})")
    crop, box = center_crop(img, min(h, w, MAX_CROP))
    return DRVector(raw_descriptor(crop), box)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    # symmetric bound on standardized values; None leaves them unbounded
    clip: float | None = None

    def transform(self, values) -> np.ndarray:
        z = (np.asarray(values, dtype=np.float64) - self.mean) / self.scale
        return z if self.clip is None else np.clip(z, -self.clip, self.clip)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(), "clip": self.clip}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64),
                   d.get("clip"))


def fit_standardizer(drs, clip: float | None = None) -> Standardizer:
    """Componentwise mean and population std (floored at 1e-6).

    With `clip`, standardized values are bounded to [-clip, clip], so a rare
    spike in one sparse component cannot pull a point far from everything else.
    """
    vals = [d.values if isinstance(d, DRVector) else d for d in drs]
    if len(vals) == 0:
        raise ValueError("cannot fit a standardizer on no vectors")
    if len(vals) < 2:
        raise ValueError("need at least 2 vectors to fit a standardizer")
    X = np.asarray(vals, dtype=np.float64)
    if clip is not None and clip <= 0:
        raise ValueError("clip must be positive")
    return Standardizer(X.mean(axis=0), np.maximum(X.std(axis=0), SCALE_FLOOR), clip)


def extract_dr(img, standardizer: Standardizer | None = None) -> DRVector:
    raw = extract_raw(img)
    if standardizer is None:
        return raw
    return DRVector(standardizer.transform(raw.values), raw.source_crop)


def write_dr_csv(path, rows) -> None:
    """rows: iterable of (image path, values)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", *FEATURE_NAMES])
        for p, v in rows:
            w.writerow([p, *(repr(float(x)) for x in v)])


def read_dr_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[1:] != list(FEATURE_NAMES):
            raise ValueError(f"{path}: unexpected DR header")
        rows = list(r)
    return [row[0] for row in rows], np.array([[float(x) for x in row[1:]] for row in rows])
