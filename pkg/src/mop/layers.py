"""Small shared building blocks for the trainable components."""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
import torch.nn as nn


def zero_module(module: nn.Module) -> nn.Module:
    """Zero all parameters in place (used for identity-at-init output layers)."""
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Classic sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.device)
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(torch.get_default_dtype())


def sincos_pos_embed_2d(h: int, w: int, dim: int) -> torch.Tensor:
    """2-D sine/cosine position table for (h*w) tokens, shape (h*w, dim)."""
    if dim % 4 != 0:
        raise ValueError(f"2-D sincos embedding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        args = coord[:, None] * omega[None, :]
        parts.extend([np.sin(args), np.cos(args)])
    table = np.concatenate(parts, axis=1)
    return torch.from_numpy(table).to(torch.get_default_dtype())


def parameter_hash(module: nn.Module) -> str:
    """Stable digest of all parameters and buffers (frozen-encoder invariance checks)."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def pooled(tokens: torch.Tensor) -> torch.Tensor:
    """Mean over the token axis: (..., N, D) -> (..., D)."""
    return tokens.mean(dim=-2)
