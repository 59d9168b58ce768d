"""Edge extraction and the defocus-confidence-weighted edge prompt.

The Canny implementation is deliberately written as a fixed sequence of
elementary operations (tap-ordered convolutions, comparison-based sector
selection) so that a scalar transcription of the same algorithm reproduces it
bit-for-bit; the test suite holds such a reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .defocus import DefocusPrompt
from .errors import ValidationError
from .imgio import ImagePatch

CANNY_SIGMA = 1.4
CANNY_RADIUS = 2  # 5x5 smoothing window
EDGE_CHANNELS = 16

_TAN_22_5 = math.tan(math.pi / 8.0)
_TAN_67_5 = math.tan(3.0 * math.pi / 8.0)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])


@dataclass
class EdgeMap:
    """Binary, non-maximum-suppressed edge mask."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if not np.isin(m, (0, 1)).all():
            raise ValidationError("edge mask must be binary")
        self.mask = m.astype(np.uint8)


@dataclass
class EdgePrompt:
    """Confidence-weighted edge features, channels-first (C_e, H, W)."""

    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float32)
        if f.ndim != 3:
            raise ValidationError(f"edge prompt must be (C, H, W), got shape {f.shape}")
        if not np.isfinite(f).all():
            raise ValidationError("edge prompt contains non-finite values")
        self.features = f


def gaussian_kernel_2d(sigma: float, radius: int) -> np.ndarray:
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def conv2d_clamped(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate with clamp (edge-replicate) padding, accumulating taps in row-major order."""
    kh, kw = kernel.shape
    rh, rw = kh // 2, kw // 2
    padded = np.pad(img.astype(np.float64), ((rh, rh), (rw, rw)), mode="edge")
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            out += kernel[u, v] * padded[u : u + h, v : v + w]
    return out


def _shift_clamped(arr: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """arr[r + dr, c + dc] with indices clamped to the image."""
    padded = np.pad(arr, 1, mode="edge")
    h, w = arr.shape
    return padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]


def canny(image: ImagePatch, low: float = 0.1, high: float = 0.2) -> EdgeMap:
    """Canny edges: luminance, Gaussian smoothing, Sobel, 4-direction NMS, hysteresis.

    Thresholds apply to the gradient magnitude normalized by its maximum.
    """
    if not (0.0 <= low < high <= 1.0):
        raise ValidationError(f"need 0 <= low < high <= 1, got low={low} high={high}")
    px = image.pixels.astype(np.float64)
    gray = px[:, :, 0] * 0.299 + px[:, :, 1] * 0.587 + px[:, :, 2] * 0.114
    smooth = conv2d_clamped(gray, gaussian_kernel_2d(CANNY_SIGMA, CANNY_RADIUS))
    gx = conv2d_clamped(smooth, SOBEL_X)
    gy = conv2d_clamped(smooth, SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak > 0.0:
        mag = mag / peak

    ax, ay = np.abs(gx), np.abs(gy)
    horiz = ay <= _TAN_22_5 * ax
    vert = ~horiz & (ay >= _TAN_67_5 * ax)
    diag = ~horiz & ~vert
    main_diag = diag & (gx * gy > 0.0)
    anti_diag = diag & ~main_diag

    n1 = np.where(
        horiz,
        _shift_clamped(mag, 0, 1),
        np.where(vert, _shift_clamped(mag, 1, 0),
                 np.where(main_diag, _shift_clamped(mag, 1, 1), _shift_clamped(mag, 1, -1))),
    )
    n2 = np.where(
        horiz,
        _shift_clamped(mag, 0, -1),
        np.where(vert, _shift_clamped(mag, -1, 0),
                 np.where(main_diag, _shift_clamped(mag, -1, -1), _shift_clamped(mag, -1, 1))),
    )
    keep = (mag >= n1) & (mag >= n2)

    strong = keep & (mag >= high)
    candidate = keep & (mag >= low)
    labels, n_labels = ndimage.label(candidate, structure=np.ones((3, 3), dtype=int))
    if n_labels == 0:
        return EdgeMap(np.zeros_like(labels, dtype=np.uint8))
    linked = np.zeros(n_labels + 1, dtype=bool)
    linked[np.unique(labels[strong])] = True
    linked[0] = False
    return EdgeMap(linked[labels].astype(np.uint8))


## learned edge branch ---------------------------------------------------------------


class EdgeEmbedder(nn.Module):
    """Expand a binary edge mask to EDGE_CHANNELS feature channels (3x3 conv)."""

    def __init__(self, channels: int = EDGE_CHANNELS):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(1, channels, kernel_size=3, padding=1)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        return self.conv(mask)


class ConfidenceHead(nn.Module):
    """Collapse defocus features to a (0,1) confidence map at a target resolution."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, kernel_size=1)

    def forward(self, features: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
        conf = torch.sigmoid(self.conv(features))
        return F.interpolate(conf, size=target_hw, mode="bilinear", align_corners=False)


def edge_embed(edges: EdgeMap, embedder: EdgeEmbedder) -> np.ndarray:
    """Edge features (C_e, H, W) from a binary edge map."""
    with torch.no_grad():
        t = torch.from_numpy(edges.mask.astype(np.float32))[None, None]
        return embedder(t)[0].numpy()


def defocus_confidence(p_d: DefocusPrompt, head: ConfidenceHead, target_hw: tuple[int, int]) -> np.ndarray:
    """Confidence map (1, H, W) in (0, 1) derived from the defocus prompt."""
    with torch.no_grad():
        t = torch.from_numpy(p_d.features)[None]
        return head(t, target_hw)[0].numpy()


def weighted_edge_prompt(edge_features: np.ndarray, confidence: np.ndarray) -> EdgePrompt:
    """Element-wise product of edge features and confidence (broadcast over channels)."""
    ef = np.asarray(edge_features, dtype=np.float32)
    cf = np.asarray(confidence, dtype=np.float32)
    if cf.ndim == 2:
        cf = cf[None]
    if ef.shape[-2:] != cf.shape[-2:]:
        raise ValidationError(
            f"spatial dims differ: edge features {ef.shape[-2:]} vs confidence {cf.shape[-2:]}"
        )
    return EdgePrompt(ef * cf)
