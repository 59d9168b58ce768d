"""Transformer that moves a degraded pathology prompt toward its sharp-image
counterpart, conditioned on the defocus prompt.

The final output projection is zero-initialized, so before any optimization the
restorer is exactly the identity on its input tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .defocus import DefocusPrompt
from .encoders import PathologyPrompt
from .errors import ValidationError
from .layers import sincos_pos_embed_2d, zero_module


@dataclass(frozen=True)
class PromptRestorerConfig:
    blocks: int = 4  # L stacked transformer blocks
    heads: int = 4
    dim: int = 192  # D_p, pathology token width
    defocus_dim: int = 192  # D_d, defocus token width after projection

    def __post_init__(self):
        if self.blocks < 1:
            raise ValidationError(f"need at least one block, got {self.blocks}")
        if self.dim % self.heads:
            raise ValidationError(f"dim {self.dim} not divisible by heads {self.heads}")


class RestorerBlock(nn.Module):
    """Pre-norm self-attention, cross-attention to defocus tokens, feed-forward."""

    def __init__(self, cfg: PromptRestorerConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.self_attn = nn.MultiheadAttention(cfg.dim, cfg.heads, batch_first=True)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.cross_attn = nn.MultiheadAttention(
            cfg.dim, cfg.heads, kdim=cfg.defocus_dim, vdim=cfg.defocus_dim, batch_first=True
        )
        self.norm3 = nn.LayerNorm(cfg.dim)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.dim, cfg.dim * 2), nn.GELU(), nn.Linear(cfg.dim * 2, cfg.dim)
        )

    def forward(self, x: torch.Tensor, defocus_tokens: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, need_weights=False)[0]
        x = x + self.cross_attn(self.norm2(x), defocus_tokens, defocus_tokens, need_weights=False)[0]
        return x + self.ffn(self.norm3(x))


class PromptRestorer(nn.Module):
    def __init__(self, cfg: PromptRestorerConfig, defocus_channels: int):
        super().__init__()
        self.cfg = cfg
        self.defocus_channels = defocus_channels
        self.defocus_proj = nn.Linear(defocus_channels, cfg.defocus_dim)
        self.blocks = nn.ModuleList(RestorerBlock(cfg) for _ in range(cfg.blocks))
        self.out_proj = zero_module(nn.Linear(cfg.dim, cfg.dim))

    def _defocus_tokens(self, p_d: torch.Tensor) -> torch.Tensor:
        b, c, h, w = p_d.shape
        if c != self.defocus_channels:
            raise ValidationError(
                f"defocus prompt has {c} channels, restorer expects {self.defocus_channels}"
            )
        tokens = p_d.flatten(2).transpose(1, 2)
        tokens = self.defocus_proj(tokens)
        return tokens + sincos_pos_embed_2d(h, w, tokens.shape[-1])[None].to(tokens.dtype)

    def forward(self, p_lp: torch.Tensor, p_d: torch.Tensor) -> torch.Tensor:
        """(B, N, D) degraded tokens + (B, C_d, H_d, W_d) defocus features -> (B, N, D)."""
        if p_lp.shape[-1] != self.cfg.dim:
            raise ValidationError(f"token dim {p_lp.shape[-1]} != configured {self.cfg.dim}")
        dtok = self._defocus_tokens(p_d)
        x = p_lp
        for block in self.blocks:
            x = block(x, dtok)
        return p_lp + self.out_proj(x)

    @torch.no_grad()
    def restore(self, p_lp: PathologyPrompt, p_d: DefocusPrompt) -> PathologyPrompt:
        was_training = self.training
        self.eval()
        out = self.forward(
            torch.from_numpy(p_lp.tokens)[None], torch.from_numpy(p_d.features)[None]
        )
        if was_training:
            self.train()
        return PathologyPrompt.from_tokens(out[0].numpy())


def restore_prompt(p_lp: PathologyPrompt, p_d: DefocusPrompt, model: PromptRestorer) -> PathologyPrompt:
    return model.restore(p_lp, p_d)


def prompt_loss(p_p, p_hp) -> float:
    """Mean absolute difference over all token entries."""
    a = p_p.tokens if isinstance(p_p, PathologyPrompt) else np.asarray(p_p)
    b = p_hp.tokens if isinstance(p_hp, PathologyPrompt) else np.asarray(p_hp)
    if a.shape != b.shape:
        raise ValidationError(f"prompt shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def prompt_distance_report(p_lp, p_p, p_hp) -> dict[str, float]:
    """Mean-squared distances of the degraded and restored prompts to the sharp prompt."""
    arrays = []
    for p in (p_lp, p_p, p_hp):
        arrays.append(p.tokens if isinstance(p, PathologyPrompt) else np.asarray(p))
    if not (arrays[0].shape == arrays[1].shape == arrays[2].shape):
        raise ValidationError(f"prompt shapes differ: {[a.shape for a in arrays]}")
    hp = arrays[2].astype(np.float64)
    return {
        "mse_lp": float(np.mean((arrays[0].astype(np.float64) - hp) ** 2)),
        "mse_p": float(np.mean((arrays[1].astype(np.float64) - hp) ** 2)),
    }


def train_prompt_restorer(
    p_lp: np.ndarray,
    p_d: np.ndarray,
    p_hp: np.ndarray,
    model: PromptRestorer,
    epochs: int = 500,
    batch_size: int = 16,
    lr: float = 1e-4,
    gamma: float = 0.98,
    seed: int = 0,
    log=None,
) -> list[float]:
    """Minimize the L1 token loss with Adam + per-epoch step decay.

    p_lp/p_hp: (N, N_t, D) token arrays; p_d: (N, C_d, H_d, W_d) defocus features.
    """
    if len(p_lp) == 0:
        raise ValidationError("empty prompt-restoration training set")
    if not (len(p_lp) == len(p_d) == len(p_hp)):
        raise ValidationError("prompt triple arrays must have equal length")
    torch.manual_seed(seed)
    x_lp = torch.from_numpy(p_lp.astype(np.float32))
    x_d = torch.from_numpy(p_d.astype(np.float32))
    x_hp = torch.from_numpy(p_hp.astype(np.float32))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=1, gamma=gamma)
    n = len(x_lp)
    history = []
    model.train()
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        for i0 in range(0, n, batch_size):
            idx = order[i0 : i0 + batch_size]
            out = model(x_lp[idx], x_d[idx])
            loss = (out - x_hp[idx]).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
        sched.step()
        history.append(total / n)
        if log is not None:
            log(f"prompt-restorer epoch {epoch + 1}/{epochs} loss {history[-1]:.6f}")
    model.eval()
    return history
