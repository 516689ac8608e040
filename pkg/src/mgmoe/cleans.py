"""Procedural clean images: smooth color fields with hard-edged shapes and mild texture."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagecore import as_image, save_png


def clean_image(seed: int, size: int = 128) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    for ch in range(3):
        field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 6, mode="wrap")
        field /= np.abs(field).max() + 1e-12
        img[..., ch] = 0.5 + 0.25 * field + 0.15 * rng.uniform(-1, 1) * (xx - 0.5 + yy - 0.5)
    for _ in range(rng.integers(4, 9)):
        color = rng.uniform(0.1, 0.9, 3)
        alpha = rng.uniform(0.6, 1.0)
        cy, cx = rng.uniform(0, 1, 2)
        if rng.random() < 0.5:
            r = rng.uniform(0.05, 0.25)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hy, hx = rng.uniform(0.05, 0.3, 2)
            mask = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        shade = 1.0 + 0.2 * (yy - cy)
        img[mask] = (1 - alpha) * img[mask] + alpha * (color[None, :] * shade[mask][:, None])
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=1.0)
    img += 0.02 * texture[..., None] / (texture.std() + 1e-12)
    return as_image(img)


def write_clean_set(directory, count: int, seed: int = 0, size: int = 128) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    paths = []
    for i, child in enumerate(ss.spawn(count)):
        p = out / f"clean_{i:04d}.png"
        save_png(clean_image(int(child.generate_state(1)[0]), size), p)
        paths.append(p)
    return paths
