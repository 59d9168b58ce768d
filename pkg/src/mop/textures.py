"""Procedural tissue-like textures used as sharp source images for simulation."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def _smooth_field(shape, rng, scale=8, amplitude=1.0):
    coarse = rng.standard_normal((max(2, shape[0] // scale), max(2, shape[1] // scale)))
    zoom = (shape[0] / coarse.shape[0], shape[1] / coarse.shape[1])
    field = ndimage.zoom(coarse, zoom, order=3)[: shape[0], : shape[1]]
    return amplitude * field / (np.abs(field).max() + 1e-9)


def procedural_tissue(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Render a stained-tissue look-alike: pale background, dark nuclei, fine speckle.

    Returns float32 (H, W, 3) in [0, 1] with plenty of high-frequency content so
    that defocus blur is visible and restoration is learnable.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = np.array([0.86, 0.74, 0.84])
    img = np.empty((height, width, 3), dtype=np.float64)
    illum = _smooth_field((height, width), rng, scale=10, amplitude=0.05)
    for ch in range(3):
        img[:, :, ch] = base[ch] + illum * (0.6 + 0.4 * rng.random())

    # nuclei: dark violet ellipses with chromatin speckle and a lighter halo
    n_cells = max(6, (height * width) // 350)
    nucleus_base = np.array([0.34, 0.20, 0.52])
    for _ in range(n_cells):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ra, rb = rng.uniform(2.5, 6.5), rng.uniform(2.5, 6.5)
        theta = rng.uniform(0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        u = (yy - cy) * ct + (xx - cx) * st
        v = -(yy - cy) * st + (xx - cx) * ct
        dist = np.sqrt((u / ra) ** 2 + (v / rb) ** 2)
        core = np.clip(1.2 - dist, 0.0, 1.0) ** 1.5
        halo = np.clip(1.8 - dist, 0.0, 1.0) * 0.25
        tint = nucleus_base + rng.normal(0, 0.04, size=3)
        for ch in range(3):
            img[:, :, ch] = img[:, :, ch] * (1 - core) + core * tint[ch]
            img[:, :, ch] -= halo * 0.10 * (1 - core)

    # chromatin / cytoplasm micro-texture
    speckle = rng.normal(0.0, 1.0, size=(height, width))
    speckle = ndimage.gaussian_filter(speckle, 0.6)
    speckle /= np.abs(speckle).max() + 1e-9
    img += speckle[:, :, None] * 0.06
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.01, 0.99).astype(np.float32)
