"""Synthetic degradation operators and the gated degradation pipeline.

Every stochastic operator takes an explicit integer seed, and every sampled
parameter (including those seeds) is recorded in a DegradationSpec, so a spec
can be replayed on the clean image to reproduce the degraded one bit-exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from .imagecore import as_image

PIPELINE_ORDER = ("lowlight", "blur", "noise", "rain", "snow", "haze", "jpeg")
GATED_KINDS = PIPELINE_ORDER[:-1]
DIST_MODES = ("in_dist", "out_dist")
GATE_PROB = 0.5

# (min, max) per parameter and dist mode; integer ranges are inclusive
RANGES = {
    "in_dist": {
        "blur_sigma": (1.0, 3.0),
        "blur_ksize": (7, 23),
        "noise_sigma": (15.0, 35.0),
        "rain_count": (50, 100),
        "rain_direction": (-45.0, 45.0),
        "rain_length": (20, 40),
        "haze_a": (0.8, 1.0),
        "haze_beta": (0.5, 1.5),
        "snow_coverage": (0.3, 0.7),
        "lowlight_gamma": (1.0, 2.0),
        "jpeg_quality": (20, 40),
    },
    "out_dist": {
        "blur_sigma": (3.0, 4.0),
        "blur_ksize": (7, 23),
        "noise_sigma": (35.0, 50.0),
        "rain_count": (101, 150),
        "rain_direction": (-45.0, 45.0),
        "rain_length": (20, 40),
        "haze_a": (0.8, 1.0),
        "haze_beta": (1.5, 2.0),
        "snow_coverage": (0.3, 0.7),
        "lowlight_gamma": (2.0, 2.5),
        "jpeg_quality": (10, 19),
    },
}
RAIN_WIDTHS = (3, 5, 7, 9, 11)
# seeds per pixel = count / RAIN_REF_AREA, independent of image size
RAIN_REF_AREA = 128 * 128
RAIN_GAIN = 0.5

# named recipes: abbreviations of the mixed scenarios plus single kinds
_ABBREV = {"LL": "lowlight", "B": "blur", "N": "noise", "R": "rain",
           "S": "snow", "H": "haze", "J": "jpeg"}
MIXTURE_RECIPES = ("H-R", "H-N", "H-N-R", "LL-H-N-R", "LL-H-N-S", "LL-H-N-B-R", "LL-H-N-B-S")
SINGLE_RECIPES = ("LL", "B", "N", "R", "S", "H", "J")


class DegradationError(ValueError):
    pass


def recipe_kinds(recipe: str) -> list[str]:
    """Kinds of a named recipe, sorted into pipeline order."""
    if not recipe:
        raise DegradationError("empty recipe")
    if recipe not in MIXTURE_RECIPES and recipe not in SINGLE_RECIPES:
        raise DegradationError(f"unknown recipe {recipe!r}")
    kinds = {_ABBREV[tok] for tok in recipe.split("-")}
    return [k for k in PIPELINE_ORDER if k in kinds]


@dataclass
class DegradationSpec:
    applied: list = field(default_factory=list)  # [(kind, {param: value})]
    dist_mode: str = "in_dist"
    seed: int = 0

    @property
    def kinds(self) -> list[str]:
        return [k for k, _ in self.applied]

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "dist_mode": self.dist_mode,
            "applied": [{"kind": k, "params": dict(p)} for k, p in self.applied],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(applied=[(a["kind"], dict(a["params"])) for a in d["applied"]],
                   dist_mode=d["dist_mode"], seed=int(d["seed"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DegradationSpec":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------- operators

def gaussian_kernel(ksize: int, sigma_x: float, sigma_y: float | None = None,
                    theta: float = 0.0) -> np.ndarray:
    """Normalized (an)isotropic Gaussian kernel rotated by `theta` radians."""
    if ksize % 2 == 0 or ksize < 1:
        raise DegradationError(f"kernel size must be odd, got {ksize}")
    sigma_y = sigma_x if sigma_y is None else sigma_y
    r = ksize // 2
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    c, s = math.cos(theta), math.sin(theta)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    k = np.exp(-0.5 * (u * u / sigma_x ** 2 + v * v / sigma_y ** 2))
    return k / k.sum()


def _filter2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.convolve(img[..., ch], kernel, mode="mirror")
    return out


def apply_blur(img, kernel, ksize: int | None = None) -> np.ndarray:
    img = as_image(img)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise DegradationError("blur kernel must be square")
    if ksize is not None and ksize != kernel.shape[0]:
        raise DegradationError(f"ksize {ksize} does not match kernel {kernel.shape}")
    if kernel.shape[0] % 2 == 0:
        raise DegradationError(f"kernel size must be odd, got {kernel.shape[0]}")
    if abs(kernel.sum() - 1.0) > 1e-6:
        raise DegradationError(f"kernel must sum to 1, sums to {kernel.sum():.6g}")
    return np.clip(_filter2d(img, kernel), 0.0, 1.0)


def apply_noise(img, sigma: float, seed: int = 0) -> np.ndarray:
    """Additive Gaussian noise; `sigma` is on the [0, 1] intensity scale."""
    if sigma < 0:
        raise DegradationError(f"negative noise sigma {sigma}")
    img = as_image(img)
    if sigma == 0:
        return img
    n = np.random.default_rng(seed).standard_normal(img.shape)
    return np.clip(img + sigma * n, 0.0, 1.0)


def line_kernel(length: int, angle_deg: float, width: int = 1) -> np.ndarray:
    """Normalized motion kernel: a segment of `length` px at `angle_deg`, `width` px thick."""
    if length < 1 or width < 1:
        raise DegradationError("line length and width must be positive")
    size = int(length) + int(width) + 2
    size += 1 - size % 2
    r = size // 2
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    along = c * xx - s * yy
    across = s * xx + c * yy
    half = (length - 1) / 2.0
    mask = (np.abs(along) <= half + 1e-9) & (np.abs(across) <= (width - 1) / 2.0 + 0.5 - 1e-9)
    k = mask.astype(np.float64)
    # trim empty borders, keep odd and centered
    rows = np.where(k.any(axis=1))[0]
    cols = np.where(k.any(axis=0))[0]
    m = max(r - rows.min(), rows.max() - r, r - cols.min(), cols.max() - r)
    k = k[r - m:r + m + 1, r - m:r + m + 1]
    return k / k.sum()


def rain_kernel(length: int, angle_deg: float, width: int) -> np.ndarray:
    """Line kernel widened by a Gaussian whose window is `width` px (OpenCV sigma rule)."""
    line = line_kernel(length, angle_deg, 1)
    sigma = 0.3 * ((width - 1) * 0.5 - 1) + 0.8
    pad = width // 2
    k = ndimage.gaussian_filter(np.pad(line, pad), sigma=sigma, truncate=pad / sigma, mode="constant")
    return k / k.sum()


def rain_layer(shape, count: int, direction: float, length: int, width: int,
               seed: int) -> np.ndarray:
    """Nonnegative streak layer r of shape (H, W).

    count / RAIN_REF_AREA streak seeds per pixel (at least one), each with a
    uniform random strength, smeared by the rain kernel.
    """
    h, w = shape
    rng = np.random.default_rng(seed)
    n = max(1, int(round(count * h * w / RAIN_REF_AREA)))
    seeds = np.zeros(h * w)
    seeds[rng.choice(h * w, size=min(n, h * w), replace=False)] = rng.uniform(0.5, 1.0, min(n, h * w))
    k = rain_kernel(length, direction, width)
    streaks = ndimage.convolve(seeds.reshape(h, w), k, mode="wrap")
    return np.clip(streaks * (RAIN_GAIN * length), 0.0, None)


def apply_rain(img, count: int, direction: float = 0.0, length: int = 30,
               width: int = 3, seed: int = 0) -> np.ndarray:
    img = as_image(img)
    if not (0 <= count <= 1000):
        raise DegradationError(f"rain count {count} out of range")
    if not (-45.0 <= direction <= 45.0):
        raise DegradationError(f"rain direction {direction} out of [-45, 45]")
    if not (1 <= length <= 64):
        raise DegradationError(f"rain length {length} out of range")
    if width not in RAIN_WIDTHS:
        raise DegradationError(f"rain width {width} not in {RAIN_WIDTHS}")
    if count == 0:
        return img
    r = rain_layer(img.shape[:2], count, direction, length, width, seed)
    return np.clip(img + r[..., None], 0.0, 1.0)


def depth_field(shape, seed: int, smooth: float = 0.25) -> np.ndarray:
    """Seeded smooth depth map in [0, 1]: low-frequency noise plus a vertical ramp."""
    h, w = shape
    rng = np.random.default_rng(seed)
    base = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=smooth * min(h, w), mode="wrap")
    base = (base - base.min()) / (np.ptp(base) + 1e-12)
    ramp = np.linspace(1.0, 0.0, h)[:, None] * np.ones((1, w))
    d = 0.5 * base + 0.5 * ramp
    return (d - d.min()) / (np.ptp(d) + 1e-12)


def apply_haze(img, a: float, beta_s: float, depth) -> np.ndarray:
    img = as_image(img)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != img.shape[:2]:
        raise DegradationError(f"depth {depth.shape} does not match image {img.shape[:2]}")
    if not (0.0 <= a <= 1.0):
        raise DegradationError(f"atmospheric light {a} outside [0, 1]")
    if beta_s < 0:
        raise DegradationError("negative scattering coefficient")
    t = np.exp(-beta_s * depth)[..., None]
    return np.clip(t * img + a * (1.0 - t), 0.0, 1.0)


def snow_mask(shape, coverage: float, seed: int) -> np.ndarray:
    """Procedural snow mask in [0, 1]: soft flakes plus short motion streaks.

    `coverage` scales the flake count and is the severity knob.
    """
    h, w = shape
    rng = np.random.default_rng(seed)
    n_flakes = int(round(coverage * h * w / 40.0))
    m = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(n_flakes):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.6, 1.8, size=2)
        amp = rng.uniform(0.5, 1.0)
        m += amp * np.exp(-0.5 * (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))
    angle = rng.uniform(-30, 30)
    streak = ndimage.convolve(m, line_kernel(5, 90 + angle, 1), mode="wrap")
    return np.clip(np.maximum(m, 0.6 * streak), 0.0, 1.0)


def apply_snow(img, mask) -> np.ndarray:
    img = as_image(img)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != img.shape[:2]:
        raise DegradationError(f"mask {mask.shape} does not match image {img.shape[:2]}")
    if mask.min() < 0 or mask.max() > 1:
        raise DegradationError("snow mask values must lie in [0, 1]")
    m = mask[..., None]
    return np.clip(img * (1.0 - m) + m, 0.0, 1.0)


def illumination(img) -> np.ndarray:
    return np.maximum(np.max(img, axis=2), 1e-3)


def apply_lowlight(img, gamma: float) -> np.ndarray:
    """y / I * I**gamma, written as y * I**(gamma - 1) so gamma = 1 is exact."""
    if gamma < 1:
        raise DegradationError(f"gamma must be >= 1, got {gamma}")
    img = as_image(img)
    return np.clip(img * illumination(img)[..., None] ** (gamma - 1.0), 0.0, 1.0)


# IJG standard luminance quantization table
LUMA_QTABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def quality_table(quality: int) -> np.ndarray:
    if not (1 <= quality <= 100):
        raise DegradationError(f"JPEG quality {quality} outside [1, 100]")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    q = np.floor((LUMA_QTABLE * scale + 50) / 100)
    return np.clip(q, 1, 255)


def apply_jpeg(img, quality: int) -> np.ndarray:
    """Blockwise 8x8 DCT quantization on each RGB channel (no subsampling, no entropy coding).

    The DC term keeps unit step so flat blocks keep their level; artifacts
    come from the AC quantization.
    """
    q = quality_table(int(quality)).copy()
    q[0, 0] = 1.0
    img = as_image(img)
    h, w, c = img.shape
    ph, pw = -h % 8, -w % 8
    x = np.pad(img * 255.0 - 128.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    H, W = x.shape[:2]
    blocks = x.reshape(H // 8, 8, W // 8, 8, c).transpose(0, 2, 4, 1, 3)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / q) * q
    rec = idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(H, W, c)[:h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)


# ---------------------------------------------------------------- sampling and replay

def _child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 63 - 1))


def sample_params(kind: str, dist_mode: str, rng: np.random.Generator) -> dict:
    if dist_mode not in RANGES:
        raise DegradationError(f"unknown dist mode {dist_mode!r}")
    R = RANGES[dist_mode]

    def uni(name):
        lo, hi = R[name]
        return float(rng.uniform(lo, hi))

    def integer(name):
        lo, hi = R[name]
        return int(rng.integers(lo, hi + 1))

    if kind == "lowlight":
        return {"gamma": uni("lowlight_gamma")}
    if kind == "blur":
        lo, hi = R["blur_ksize"]
        ksize = int(rng.choice(np.arange(lo, hi + 1, 2)))
        if rng.random() < 0.5:
            s = uni("blur_sigma")
            return {"ksize": ksize, "sigma_x": s, "sigma_y": s, "theta": 0.0}
        return {"ksize": ksize, "sigma_x": uni("blur_sigma"), "sigma_y": uni("blur_sigma"),
                "theta": float(rng.uniform(0, math.pi))}
    if kind == "noise":
        return {"sigma": uni("noise_sigma"), "seed": _child_seed(rng)}
    if kind == "rain":
        return {"count": integer("rain_count"), "direction": uni("rain_direction"),
                "length": integer("rain_length"), "width": int(rng.choice(RAIN_WIDTHS)),
                "seed": _child_seed(rng)}
    if kind == "snow":
        return {"coverage": uni("snow_coverage"), "seed": _child_seed(rng)}
    if kind == "haze":
        return {"a": uni("haze_a"), "beta_s": uni("haze_beta"), "depth_seed": _child_seed(rng)}
    if kind == "jpeg":
        return {"quality": integer("jpeg_quality")}
    raise DegradationError(f"unknown degradation kind {kind!r}")


def apply_stage(img: np.ndarray, kind: str, p: dict) -> np.ndarray:
    if kind == "lowlight":
        return apply_lowlight(img, p["gamma"])
    if kind == "blur":
        k = gaussian_kernel(p["ksize"], p["sigma_x"], p["sigma_y"], p["theta"])
        return apply_blur(img, k, p["ksize"])
    if kind == "noise":
        return apply_noise(img, p["sigma"] / 255.0, p["seed"])
    if kind == "rain":
        return apply_rain(img, p["count"], p["direction"], p["length"], p["width"], p["seed"])
    if kind == "snow":
        return apply_snow(img, snow_mask(img.shape[:2], p["coverage"], p["seed"]))
    if kind == "haze":
        return apply_haze(img, p["a"], p["beta_s"], depth_field(img.shape[:2], p["depth_seed"]))
    if kind == "jpeg":
        return apply_jpeg(img, p["quality"])
    raise DegradationError(f"unknown degradation kind {kind!r}")


def replay(clean, spec: DegradationSpec) -> np.ndarray:
    """Re-apply a recorded spec to its clean image."""
    x = as_image(clean)
    order = [PIPELINE_ORDER.index(k) for k in spec.kinds]
    if order != sorted(order):
        raise DegradationError(f"spec kinds out of pipeline order: {spec.kinds}")
    for kind, p in spec.applied:
        x = apply_stage(x, kind, p)
    return x


def _build(clean, kinds, dist_mode, seed, rng):
    applied = [(k, sample_params(k, dist_mode, rng)) for k in kinds]
    spec = DegradationSpec(applied=applied, dist_mode=dist_mode, seed=int(seed))
    return replay(clean, spec), spec


def synthesize(clean, dist_mode: str = "in_dist", seed: int = 0,
               enable_jpeg: bool = False) -> tuple[np.ndarray, DegradationSpec]:
    """Gated pipeline: each stage opens with probability 0.5; all-closed gates are resampled."""
    if dist_mode not in DIST_MODES:
        raise DegradationError(f"unknown dist mode {dist_mode!r}")
    rng = np.random.default_rng(seed)
    while True:
        gates = rng.random(len(GATED_KINDS)) < GATE_PROB
        if gates.any():
            break
    kinds = [k for k, g in zip(GATED_KINDS, gates) if g]
    if enable_jpeg:
        kinds.append("jpeg")
    return _build(clean, kinds, dist_mode, seed, rng)


def make_named_mixture(clean, recipe: str, dist_mode: str = "in_dist",
                       seed: int = 0) -> tuple[np.ndarray, DegradationSpec]:
    kinds = recipe_kinds(recipe)
    if dist_mode not in DIST_MODES:
        raise DegradationError(f"unknown dist mode {dist_mode!r}")
    return _build(clean, kinds, dist_mode, seed, np.random.default_rng(seed))


def param_in_range(kind: str, params: dict, dist_mode: str) -> bool:
    """Check the parameters that carry a dist-mode range."""
    R = RANGES[dist_mode]

    def inside(v, name):
        lo, hi = R[name]
        return lo <= v <= hi

    if kind == "lowlight":
        return inside(params["gamma"], "lowlight_gamma")
    if kind == "blur":
        return (inside(params["ksize"], "blur_ksize") and inside(params["sigma_x"], "blur_sigma")
                and inside(params["sigma_y"], "blur_sigma"))
    if kind == "noise":
        return inside(params["sigma"], "noise_sigma")
    if kind == "rain":
        return inside(params["count"], "rain_count") and inside(params["length"], "rain_length")
    if kind == "snow":
        return inside(params["coverage"], "snow_coverage")
    if kind == "haze":
        return inside(params["a"], "haze_a") and inside(params["beta_s"], "haze_beta")
    if kind == "jpeg":
        return inside(params["quality"], "jpeg_quality")
    return False
