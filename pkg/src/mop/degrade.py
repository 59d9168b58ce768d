"""Synthetic defocus degradation with closed-form blur / contrast-transfer labels.

The optical stand-in is a Gaussian point-spread function whose width grows
linearly with focal-plane distance; its modulation-transfer value at a
reference frequency serves as the contrast-transfer (CTF) label:

    sigma(d) = sigma_per_plane * |d|
    c(d)     = exp(-2 * pi^2 * sigma(d)^2 * f_ref^2)

which makes every generated label analytically checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .imgio import FocalStack, ImagePatch

REGION = 32  # side of the square blocks carrying per-region labels


@dataclass(frozen=True)
class OpticsParams:
    sigma_per_plane: float = 0.75  # blur std in pixels per unit plane offset
    f_ref: float = 0.1  # reference spatial frequency, cycles/pixel
    kernel_radius_sigmas: float = 3.0

    def __post_init__(self):
        if self.sigma_per_plane <= 0:
            raise ValidationError(f"sigma_per_plane must be > 0, got {self.sigma_per_plane}")
        if not (0 < self.f_ref < 0.5):
            raise ValidationError(f"f_ref must lie in (0, 0.5), got {self.f_ref}")
        if self.kernel_radius_sigmas < 3:
            raise ValidationError(
                f"kernel_radius_sigmas must be >= 3, got {self.kernel_radius_sigmas}"
            )


@dataclass(frozen=True)
class DefocusLabel:
    """Signed focal distance (plane-index units) and its contrast-transfer value."""

    d: float
    c: float


def ctf_value(d: float, params: OpticsParams) -> float:
    """Contrast-transfer value of the synthetic optics at focal distance d (even in d)."""
    sigma = params.sigma_per_plane * abs(d)
    return math.exp(-2.0 * math.pi**2 * sigma**2 * params.f_ref**2)


def gaussian_psf(sigma: float, params: OpticsParams) -> np.ndarray:
    """Normalized, radially symmetric Gaussian kernel; sigma=0 gives the 1x1 identity."""
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones((1, 1), dtype=np.float64)
    radius = max(1, int(math.ceil(params.kernel_radius_sigmas * sigma)))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def defocus_blur(image: ImagePatch, d: float, params: OpticsParams) -> ImagePatch:
    """Convolve each channel with the PSF at distance d (reflective boundaries)."""
    sigma = params.sigma_per_plane * abs(d)
    if sigma == 0:
        return ImagePatch(image.pixels.copy(), id=image.id)
    kernel = gaussian_psf(sigma, params)
    out = np.empty_like(image.pixels, dtype=np.float64)
    for ch in range(3):
        out[:, :, ch] = ndimage.convolve(
            image.pixels[:, :, ch].astype(np.float64), kernel, mode="reflect"
        )
    return ImagePatch(np.clip(out, 0.0, 1.0).astype(np.float32), id=image.id)


def _region_grid(height: int, width: int) -> tuple[int, int]:
    return (height + REGION - 1) // REGION, (width + REGION - 1) // REGION


def synth_focal_stack(
    sharp: ImagePatch,
    offsets: list[float],
    params: OpticsParams,
    per_region_tilt: float = 0.0,
) -> tuple[FocalStack, list[tuple[np.ndarray, np.ndarray]]]:
    """Blur the sharp image at each offset, returning the stack and per-plane label maps.

    A nonzero tilt adds a linear focal ramp across the image width so the blur
    varies within one field of view; the ramp is quantized to the label grid so
    stored labels describe the rendered blur exactly. Labels are (d_map, c_map)
    arrays over the region grid.
    """
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise ValidationError(f"offsets must be strictly increasing, got {offsets}")
    rows, cols = _region_grid(sharp.height, sharp.width)
    if cols > 1 and per_region_tilt != 0.0:
        ramp = per_region_tilt * (np.arange(cols) / (cols - 1) - 0.5)
    else:
        ramp = np.zeros(cols)
    planes = []
    labels = []
    for offset in offsets:
        d_cols = offset + ramp
        plane = np.empty_like(sharp.pixels)
        for d in np.unique(d_cols):
            blurred = defocus_blur(sharp, float(d), params).pixels
            for col in np.nonzero(d_cols == d)[0]:
                c0, c1 = col * REGION, min((col + 1) * REGION, sharp.width)
                plane[:, c0:c1] = blurred[:, c0:c1]
        d_map = np.tile(d_cols, (rows, 1))
        c_map = np.vectorize(lambda d: ctf_value(float(d), params))(d_map)
        planes.append((offset, ImagePatch(plane, id=f"{sharp.id}_d{offset:g}")))
        labels.append((d_map, c_map))
    stack = FocalStack(planes=planes, fused=sharp, spacing_um=0.0)
    return stack, labels


## lightness/chroma color space for the stain resampler -------------------------------
#
# CIELAB-like transform with a sign-preserving gamma and cube root so the
# mapping stays exactly invertible for out-of-gamut values.

_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
_WHITE = _RGB2XYZ @ np.ones(3)
_GAMMA = 2.2


def _signed_power(x: np.ndarray, p: float) -> np.ndarray:
    return np.sign(x) * np.abs(x) ** p


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    lin = _signed_power(rgb.astype(np.float64), _GAMMA)
    xyz = lin @ _RGB2XYZ.T / _WHITE
    f = np.cbrt(xyz)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([fx, fy, fz], axis=-1) ** 3 * _WHITE
    lin = xyz @ _XYZ2RGB.T
    return _signed_power(lin, 1.0 / _GAMMA)


@dataclass(frozen=True)
class StainRanges:
    """Uniform sampling ranges for per-channel (mean, std) stain targets."""

    mean_l: tuple[float, float] = (45.0, 75.0)
    std_l: tuple[float, float] = (8.0, 20.0)
    mean_ab: tuple[float, float] = (-10.0, 14.0)
    std_ab: tuple[float, float] = (4.0, 12.0)


def draw_stain_stats(seed: int, ranges: StainRanges = StainRanges()) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    means = np.array(
        [
            rng.uniform(*ranges.mean_l),
            rng.uniform(*ranges.mean_ab),
            rng.uniform(*ranges.mean_ab),
        ]
    )
    stds = np.array(
        [
            rng.uniform(*ranges.std_l),
            rng.uniform(*ranges.std_ab),
            rng.uniform(*ranges.std_ab),
        ]
    )
    return means, stds


def apply_stain_stats(image: ImagePatch, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    """Shift-and-scale each lightness/chroma channel to the target (mean, std).

    Returns the unclipped float RGB array (callers clip); keeping it unclipped
    lets the statistics be verified exactly.
    """
    lab = rgb_to_lab(image.pixels)
    out = np.empty_like(lab)
    for ch in range(3):
        src = lab[..., ch]
        mu, sd = src.mean(), src.std()
        out[..., ch] = (src - mu) / max(sd, 1e-6) * stds[ch] + means[ch]
    return lab_to_rgb(out)


def stain_augment(image: ImagePatch, seed: int, ranges: StainRanges = StainRanges()) -> ImagePatch:
    """Resample the stain style toward targets drawn deterministically from seed."""
    means, stds = draw_stain_stats(seed, ranges)
    rgb = apply_stain_stats(image, means, stds)
    return ImagePatch(np.clip(rgb, 0.0, 1.0).astype(np.float32), id=image.id)
