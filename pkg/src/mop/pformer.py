"""Coarse restorer: Restormer-style encoder-decoder whose gated feed-forward
blocks mix depth-wise convolution experts, routed from pooled image features
concatenated with the pathology prompt.

Expert mixing at the depth-wise position of the gated feed-forward block:

    w   = softmax(Linear(concat(GAP(F), prompt)))
    F_o = E_0(F) + GeLU(sum_i w_i * E_i(F))

with E_0 the standard depth-wise path at constant weight 1 and exact
(Gaussian-CDF) GeLU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .imgio import ImagePatch
from .layers import zero_module


@dataclass(frozen=True)
class PFormerConfig:
    widths: tuple[int, ...] = (48, 96, 192, 384)
    blocks: tuple[int, ...] = (2, 3, 3, 4)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    n_experts: int = 3
    prompt_dim: int = 192
    expansion: float = 2.0
    refinement_blocks: int = 2

    def __post_init__(self):
        if not (len(self.widths) == len(self.blocks) == len(self.heads)):
            raise ValidationError("widths/blocks/heads must have equal length")
        if self.n_experts < 1:
            raise ValidationError(f"need n_experts >= 1, got {self.n_experts}")
        for w, h in zip(self.widths, self.heads):
            if w % h:
                raise ValidationError(f"width {w} not divisible by heads {h}")

    @property
    def levels(self) -> int:
        return len(self.widths)


## building blocks --------------------------------------------------------------------


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of (B, C, H, W) maps."""

    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        return (x - mu) / torch.sqrt(var + 1e-5) * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


def router_weights(feats: torch.Tensor, prompt: torch.Tensor, linear: nn.Linear) -> torch.Tensor:
    """Softmax routing weights from pooled features concatenated with the prompt vector."""
    gap = feats.mean(dim=(2, 3))
    if gap.shape[1] + prompt.shape[1] != linear.in_features:
        raise ValidationError(
            f"router expects {linear.in_features} inputs, got {gap.shape[1]} + {prompt.shape[1]}"
        )
    return torch.softmax(linear(torch.cat([gap, prompt], dim=1)), dim=1)


def moe_mix(feats: torch.Tensor, weights: torch.Tensor, experts: list[nn.Module]) -> torch.Tensor:
    """Main expert plus GeLU-activated weighted sum of sub-experts.

    experts[0] is the main expert (constant weight 1); weights has one column
    per remaining expert.
    """
    if weights.shape[1] != len(experts) - 1:
        raise ValidationError(
            f"got {weights.shape[1]} weights for {len(experts) - 1} sub-experts"
        )
    mixed = 0.0
    for i, expert in enumerate(experts[1:]):
        mixed = mixed + weights[:, i].view(-1, 1, 1, 1) * expert(feats)
    return experts[0](feats) + F.gelu(mixed, approximate="none")


class MoEGatedFeedForward(nn.Module):
    """Gated-dconv feed-forward with routed depth-wise experts at the dconv position."""

    def __init__(self, dim: int, cfg: PFormerConfig):
        super().__init__()
        hidden = int(dim * cfg.expansion)
        self.router = nn.Linear(dim + cfg.prompt_dim, cfg.n_experts)
        self.project_in = nn.Conv2d(dim, hidden * 2, kernel_size=1)
        dconv = lambda: nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2)
        self.main_expert = dconv()
        self.sub_experts = nn.ModuleList(dconv() for _ in range(cfg.n_experts))
        self.project_out = nn.Conv2d(hidden, dim, kernel_size=1)
        self.last_router_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, router_feats: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        w = router_weights(router_feats, prompt, self.router)
        self.last_router_weights = w.detach()
        y = self.project_in(x)
        y = moe_mix(y, w, [self.main_expert, *self.sub_experts])
        y1, y2 = y.chunk(2, dim=1)
        return self.project_out(F.gelu(y1, approximate="none") * y2)


class Attention(nn.Module):
    """Transposed-channel attention (attention across channels, per head)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, kernel_size=1)
        self.qkv_dwconv = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3)
        self.project_out = nn.Conv2d(dim, dim, kernel_size=1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv_dwconv(self.qkv(x)).chunk(3, dim=1)
        shape = (b, self.heads, c // self.heads, h * w)
        q = F.normalize(q.reshape(shape), dim=-1)
        k = F.normalize(k.reshape(shape), dim=-1)
        v = v.reshape(shape)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.temperature, dim=-1)
        return self.project_out((attn @ v).reshape(b, c, h, w))


class PFormerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, cfg: PFormerConfig):
        super().__init__()
        self.norm1 = ChannelLayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = ChannelLayerNorm(dim)
        self.ffn = MoEGatedFeedForward(dim, cfg)

    def forward(self, x, prompt):
        x = x + self.attn(self.norm1(x))
        # router pools the block features before normalization
        return x + self.ffn(self.norm2(x), x, prompt)


class Downsample(nn.Module):
    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        if dim_out % 4:
            raise ValidationError(f"downsample target width must divide by 4, got {dim_out}")
        self.body = nn.Sequential(nn.Conv2d(dim_in, dim_out // 4, 3, padding=1), nn.PixelUnshuffle(2))

    def forward(self, x):
        return self.body(x)


class Upsample(nn.Module):
    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(dim_in, dim_out * 4, 3, padding=1), nn.PixelShuffle(2))

    def forward(self, x):
        return self.body(x)


## full model --------------------------------------------------------------------------


class PFormer(nn.Module):
    """U-shaped transformer with a global residual; identity at initialization."""

    def __init__(self, cfg: PFormerConfig = PFormerConfig()):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.patch_embed = nn.Conv2d(3, w[0], 3, padding=1)
        self.encoders = nn.ModuleList(
            nn.ModuleList(PFormerBlock(w[i], cfg.heads[i], cfg) for _ in range(cfg.blocks[i]))
            for i in range(cfg.levels)
        )
        self.downs = nn.ModuleList(Downsample(w[i], w[i + 1]) for i in range(cfg.levels - 1))
        self.ups = nn.ModuleList(Upsample(w[i + 1], w[i]) for i in range(cfg.levels - 1))
        self.skip_reduce = nn.ModuleList(nn.Conv2d(2 * w[i], w[i], 1) for i in range(cfg.levels - 1))
        self.decoders = nn.ModuleList(
            nn.ModuleList(PFormerBlock(w[i], cfg.heads[i], cfg) for _ in range(cfg.blocks[i]))
            for i in range(cfg.levels - 1)
        )
        self.refinement = nn.ModuleList(
            PFormerBlock(w[0], cfg.heads[0], cfg) for _ in range(cfg.refinement_blocks)
        )
        self.output = zero_module(nn.Conv2d(w[0], 3, 3, padding=1))

    def forward_unclipped(self, i_lq: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        factor = 2 ** (self.cfg.levels - 1)
        if i_lq.shape[-2] % factor or i_lq.shape[-1] % factor:
            raise ValidationError(
                f"input dims {tuple(i_lq.shape[-2:])} must divide by {factor}"
            )
        x = self.patch_embed(i_lq)
        skips = []
        for level in range(self.cfg.levels):
            for block in self.encoders[level]:
                x = block(x, prompt)
            if level < self.cfg.levels - 1:
                skips.append(x)
                x = self.downs[level](x)
        for level in range(self.cfg.levels - 2, -1, -1):
            x = self.ups[level](x)
            x = self.skip_reduce[level](torch.cat([x, skips[level]], dim=1))
            for block in self.decoders[level]:
                x = block(x, prompt)
        for block in self.refinement:
            x = block(x, prompt)
        return i_lq + self.output(x)

    def forward(self, i_lq: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        return torch.clamp(self.forward_unclipped(i_lq, prompt), 0.0, 1.0)

    @torch.no_grad()
    def restore(self, image: ImagePatch, prompt_pooled: np.ndarray) -> ImagePatch:
        was_training = self.training
        self.eval()
        x = torch.from_numpy(image.pixels).permute(2, 0, 1)[None]
        p = torch.from_numpy(np.asarray(prompt_pooled, dtype=np.float32))[None]
        out = self.forward(x, p)[0].permute(1, 2, 0).numpy()
        if was_training:
            self.train()
        return ImagePatch(out, id=f"{image.id}_coarse")

    def router_utilization(self) -> dict[str, np.ndarray]:
        """Mean routing weights recorded by each block on its last forward pass."""
        util = {}
        for name, module in self.named_modules():
            if isinstance(module, MoEGatedFeedForward) and module.last_router_weights is not None:
                util[name] = module.last_router_weights.mean(dim=0).numpy()
        return util


def train_pformer(
    lq: np.ndarray,
    hq: np.ndarray,
    prompts: np.ndarray,
    model: PFormer,
    epochs: int = 300,
    batch_size: int = 8,
    lr: float = 1e-4,
    gamma: float = 0.98,
    seed: int = 0,
    log=None,
) -> tuple[list[float], list[dict[str, np.ndarray]]]:
    """Pixel-L1 training with Adam + per-epoch step decay.

    lq/hq: (N, H, W, 3); prompts: (N, D_p) pooled pathology prompts. Returns the
    per-epoch loss history and per-epoch expert-utilization histograms.
    """
    if len(lq) == 0:
        raise ValidationError("empty coarse-restorer training set")
    torch.manual_seed(seed)
    x = torch.from_numpy(np.ascontiguousarray(lq.transpose(0, 3, 1, 2)))
    y = torch.from_numpy(np.ascontiguousarray(hq.transpose(0, 3, 1, 2)))
    p = torch.from_numpy(prompts.astype(np.float32))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=1, gamma=gamma)
    n = len(x)
    history, utilization = [], []
    model.train()
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        util_acc: dict[str, np.ndarray] = {}
        batches = 0
        for i0 in range(0, n, batch_size):
            idx = order[i0 : i0 + batch_size]
            out = model.forward_unclipped(x[idx], p[idx])
            loss = (out - y[idx]).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
            batches += 1
            for name, w in model.router_utilization().items():
                util_acc[name] = util_acc.get(name, 0.0) + w
        sched.step()
        history.append(total / n)
        utilization.append({k: v / batches for k, v in util_acc.items()})
        if log is not None:
            log(f"pformer epoch {epoch + 1}/{epochs} loss {history[-1]:.5f}")
    model.eval()
    return history, utilization
