"""Multi-task defocus estimation: a stride-32 residual CNN predicting the focal
distance and contrast-transfer value of a patch, exposing its pre-pool feature
map as the defocus prompt."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .degrade import StainRanges, apply_stain_stats
from .errors import ValidationError
from .imgio import ImagePatch

BACKBONE_STRIDE = 32


@dataclass
class DefocusPrompt:
    """Pre-pool defocus features, channels-first (C_d, H_d, W_d)."""

    features: np.ndarray
    source_hw: tuple[int, int]

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float32)
        if f.ndim != 3:
            raise ValidationError(f"defocus prompt must be (C, H, W), got {f.shape}")
        if not np.isfinite(f).all():
            raise ValidationError("defocus prompt contains non-finite values")
        self.features = f


@dataclass
class DefocusEstimate:
    d_hat: float
    c_hat: float

    @property
    def c_hat_reported(self) -> float:
        """Contrast value clipped to (0, 1] for reporting."""
        return float(min(max(self.c_hat, 1e-6), 1.0))


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        groups = min(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(x + h)


def reference_stain_stats(ranges: StainRanges = StainRanges()) -> tuple[np.ndarray, np.ndarray]:
    """Fixed stain-normalization target: the midpoint of every sampling range."""
    mid = lambda pair: 0.5 * (pair[0] + pair[1])
    means = np.array([mid(ranges.mean_l), mid(ranges.mean_ab), mid(ranges.mean_ab)])
    stds = np.array([mid(ranges.std_l), mid(ranges.std_ab), mid(ranges.std_ab)])
    return means, stds


class DefocusEstimator(nn.Module):
    """Stem + 4 downsampling residual stages (total stride 32) with a 2-way linear head."""

    def __init__(self, widths: tuple[int, ...] = (16, 32, 64, 128), blocks_per_stage: int = 1):
        super().__init__()
        if len(widths) != 4:
            raise ValidationError(f"expected 4 stage widths, got {widths}")
        self.widths = tuple(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=2, padding=1),
            nn.GroupNorm(min(8, widths[0]), widths[0]),
            nn.ReLU(),
        )
        stages = []
        in_ch = widths[0]
        for w in widths:
            layers = [
                nn.Conv2d(in_ch, w, 3, stride=2, padding=1),
                nn.GroupNorm(min(8, w), w),
                nn.ReLU(),
            ]
            layers += [ResidualBlock(w) for _ in range(blocks_per_stage)]
            stages.append(nn.Sequential(*layers))
            in_ch = w
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(widths[-1], 2)

    @property
    def feature_channels(self) -> int:
        return self.widths[-1]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ((B, 2) predictions, (B, C_d, H/32, W/32) pre-pool features)."""
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        pred = self.head(h.mean(dim=(2, 3)))
        return pred, h

    def distance_head(self) -> nn.Linear:
        """Standalone C_d -> 1 linear map carrying the distance row of the head."""
        lin = nn.Linear(self.feature_channels, 1)
        with torch.no_grad():
            lin.weight.copy_(self.head.weight[0:1])
            lin.bias.copy_(self.head.bias[0:1])
        return lin

    @torch.no_grad()
    def estimate(self, image: ImagePatch, apply_stain_norm: bool = False) -> tuple[DefocusEstimate, DefocusPrompt]:
        h, w = image.height, image.width
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise ValidationError(
                f"image dims must be divisible by {BACKBONE_STRIDE}, got {h}x{w}"
            )
        px = image.pixels
        if apply_stain_norm:
            means, stds = reference_stain_stats()
            px = np.clip(apply_stain_stats(image, means, stds), 0.0, 1.0).astype(np.float32)
        was_training = self.training
        self.eval()
        x = torch.from_numpy(px).permute(2, 0, 1)[None]
        pred, feats = self.forward(x)
        if was_training:
            self.train()
        est = DefocusEstimate(d_hat=float(pred[0, 0]), c_hat=float(pred[0, 1]))
        return est, DefocusPrompt(feats[0].numpy(), source_hw=(h, w))


def defocus_loss(pred, gt) -> float:
    """L1 distance + L1 contrast error; sequences are averaged over the batch."""
    if not isinstance(pred, (list, tuple)):
        pred, gt = [pred], [gt]
    if len(pred) != len(gt):
        raise ValidationError(f"batch sizes differ: {len(pred)} vs {len(gt)}")
    total = 0.0
    for p, g in zip(pred, gt):
        total += abs(g.d - p.d_hat) + abs(g.c - p.c_hat)
    return total / len(pred)


def defocus_loss_tensor(pred: torch.Tensor, target: torch.Tensor, targets: str = "both") -> torch.Tensor:
    """Training loss on (B, 2) predictions vs (B, 2) ground truth [d, c]."""
    l1 = (pred - target).abs()
    if targets == "both":
        return (l1[:, 0] + l1[:, 1]).mean()
    if targets == "distance":
        return l1[:, 0].mean()
    if targets == "ctf":
        return l1[:, 1].mean()
    raise ValidationError(f"unknown target mode {targets!r} (use both/distance/ctf)")


def defocus_heatmap(prompt: DefocusPrompt, distance_head: nn.Linear) -> np.ndarray:
    """Per-location |distance| map, bilinearly upsampled to the source resolution."""
    c_d = prompt.features.shape[0]
    if distance_head.in_features != c_d or distance_head.out_features != 1:
        raise ValidationError(
            f"distance head maps {distance_head.in_features}->{distance_head.out_features}, "
            f"expected {c_d}->1"
        )
    with torch.no_grad():
        feats = torch.from_numpy(prompt.features)[None]
        heat = torch.einsum("bchw,oc->bohw", feats, distance_head.weight) + distance_head.bias.view(1, -1, 1, 1)
        heat = F.interpolate(heat, size=prompt.source_hw, mode="bilinear", align_corners=False)
    return heat[0, 0].abs().numpy()


def train_defocus(
    patches: np.ndarray,
    labels: np.ndarray,
    model: DefocusEstimator,
    epochs: int = 100,
    batch_size: int = 16,
    lr: float = 1e-4,
    gamma: float = 0.95,
    targets: str = "both",
    seed: int = 0,
    log=None,
) -> list[float]:
    """Optimize the L1 multi-task objective with Adam + per-epoch step decay.

    patches: (N, H, W, 3) float32 in [0,1]; labels: (N, 2) columns [d, c].
    Returns the per-epoch mean training loss.
    """
    if len(patches) == 0:
        raise ValidationError("empty defocus training set")
    torch.manual_seed(seed)
    x = torch.from_numpy(np.ascontiguousarray(patches.transpose(0, 3, 1, 2)))
    y = torch.from_numpy(labels.astype(np.float32))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=1, gamma=gamma)
    history = []
    n = len(x)
    model.train()
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        for i0 in range(0, n, batch_size):
            idx = order[i0 : i0 + batch_size]
            pred, _ = model(x[idx])
            loss = defocus_loss_tensor(pred, y[idx], targets)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
        sched.step()
        history.append(total / n)
        if log is not None:
            log(f"defocus epoch {epoch + 1}/{epochs} loss {history[-1]:.5f}")
    model.eval()
    return history


def z_accuracy(d_hat: np.ndarray, d: np.ndarray) -> float:
    """Fraction of samples whose rounded predicted distance hits the true plane index."""
    return float(np.mean(np.rint(d_hat) == d))
