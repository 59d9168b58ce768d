"""Fine-stage residual diffusion: schedule algebra, conditional denoiser with
prompt cross-attention and edge fusion, and the short deterministic-seed sampler.

The chain shifts the state from the clean image toward the conditioning image
through the residual e0 = I_cond - x0:

    q(x_t | x_{t-1}) = N(x_{t-1} + alpha_t * e0, kappa^2 * alpha_t * I)
    q(x_t | x_0)     = N(x_0 + eta_t * e0,       kappa^2 * eta_t  * I)

Gaussian conjugacy of the two transitions gives the sampling posterior

    q(x_{t-1} | x_t, x_0) = N((eta_{t-1}/eta_t) x_t + (alpha_t/eta_t) x_0,
                              kappa^2 * eta_{t-1} * alpha_t / eta_t * I)

in which the residual term cancels; the test suite re-verifies both moments by
Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .edges import EdgePrompt
from .encoders import PathologyPrompt
from .errors import ValidationError
from .imgio import ImagePatch
from .layers import timestep_embedding, zero_module


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative shift fractions eta[0..T], per-step increments alpha[1..T], noise scale kappa."""

    eta: np.ndarray
    alpha: np.ndarray
    kappa: float

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if eta[0] != 0.0:
            raise ValidationError(f"eta[0] must be 0, got {eta[0]}")
        if np.any(np.diff(eta) <= 0):
            raise ValidationError("eta must be strictly increasing")
        if abs(eta[-1] - 1.0) > 1e-9:
            raise ValidationError(f"eta[T] must be 1 within 1e-9, got {eta[-1]}")
        if alpha.shape != (len(eta) - 1,) or np.any(alpha <= 0):
            raise ValidationError("alpha must be the positive increments of eta")
        if self.kappa <= 0:
            raise ValidationError(f"kappa must be > 0, got {self.kappa}")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "alpha", alpha)

    @property
    def steps(self) -> int:
        return len(self.alpha)


def make_schedule(T: int = 4, kappa: float = 2.0, eta1: float = 0.04) -> DiffusionSchedule:
    """Geometric interpolation eta[t] = eta1^((T-t)/(T-1)), forced to eta[T] = 1."""
    if T < 1:
        raise ValidationError(f"need T >= 1, got {T}")
    if not (0.0 < eta1 < 1.0):
        raise ValidationError(f"need 0 < eta1 < 1, got {eta1}")
    if kappa <= 0:
        raise ValidationError(f"need kappa > 0, got {kappa}")
    eta = np.zeros(T + 1, dtype=np.float64)
    if T == 1:
        eta[1] = 1.0
    else:
        for t in range(1, T + 1):
            eta[t] = eta1 ** ((T - t) / (T - 1))
    return DiffusionSchedule(eta=eta, alpha=np.diff(eta), kappa=kappa)


def _check_t(t: int, sched: DiffusionSchedule) -> None:
    if not (1 <= t <= sched.steps):
        raise ValidationError(f"t must lie in [1, {sched.steps}], got {t}")


def forward_marginal(x0, i_lq, t: int, noise, sched: DiffusionSchedule):
    """Marginal draw x_t = x0 + eta_t (i_lq - x0) + kappa sqrt(eta_t) noise."""
    _check_t(t, sched)
    eta_t = float(sched.eta[t])
    return x0 + eta_t * (i_lq - x0) + sched.kappa * math.sqrt(eta_t) * noise


def posterior_step(x_t, x0_hat, i_lq, t: int, noise, sched: DiffusionSchedule):
    """One reverse step; at t=1 the variance is exactly zero and x0_hat is returned.

    The conditioning image does not appear in the posterior mean (its residual
    contribution cancels); the argument is kept for interface symmetry.
    """
    _check_t(t, sched)
    del i_lq
    if t == 1:
        return x0_hat + 0.0 * noise
    eta_t, eta_prev = float(sched.eta[t]), float(sched.eta[t - 1])
    alpha_t = float(sched.alpha[t - 1])
    mean = (eta_prev / eta_t) * x_t + (alpha_t / eta_t) * x0_hat
    std = sched.kappa * math.sqrt(eta_prev * alpha_t / eta_t)
    return mean + std * noise


## conditional denoiser ----------------------------------------------------------------


@dataclass
class DenoiserInputs:
    """Arguments of one denoiser evaluation (x0 prediction)."""

    x_t: np.ndarray
    i_lq: ImagePatch
    t: int
    p_p: PathologyPrompt
    p_e: EdgePrompt | None = None

    def __post_init__(self):
        if self.t < 1:
            raise ValidationError(f"t must be >= 1, got {self.t}")
        xs = np.asarray(self.x_t).shape[:2]
        if xs != (self.i_lq.height, self.i_lq.width):
            raise ValidationError(f"x_t spatial dims {xs} differ from conditioning image")
        if self.p_e is not None and self.p_e.features.shape[1:] != xs:
            raise ValidationError("edge prompt spatial dims differ from x_t")


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, ch_in), ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, ch_out)
        self.norm2 = nn.GroupNorm(min(8, ch_out), ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class PromptCrossAttention(nn.Module):
    """Spatial queries attending over pathology prompt tokens."""

    def __init__(self, dim: int, prompt_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(min(8, dim), dim)
        self.to_q = nn.Conv2d(dim, dim, 1)
        self.to_k = nn.Linear(prompt_dim, dim)
        self.to_v = nn.Linear(prompt_dim, dim)
        self.proj = zero_module(nn.Conv2d(dim, dim, 1))

    def forward(self, x, tokens):
        b, c, h, w = x.shape
        head_dim = c // self.heads
        q = self.to_q(self.norm(x)).reshape(b, self.heads, head_dim, h * w).transpose(-2, -1)
        k = self.to_k(tokens).reshape(b, -1, self.heads, head_dim).transpose(1, 2)
        v = self.to_v(tokens).reshape(b, -1, self.heads, head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(head_dim), dim=-1)
        out = (attn @ v).transpose(-2, -1).reshape(b, c, h, w)
        return x + self.proj(out)


class ConditionalDenoiser(nn.Module):
    """U-Net predicting the clean image from (x_t, conditioning image, t, prompts).

    The edge prompt joins after the input convolution through a 1x1 fusion; the
    pathology tokens enter via cross-attention at the lowest-resolution levels.
    """

    def __init__(
        self,
        widths: tuple[int, ...] = (32, 64, 128, 256),
        blocks_per_level: int = 2,
        prompt_dim: int = 192,
        edge_channels: int = 16,
        cross_attn_levels: int = 2,
        heads: int = 4,
        condition_on_raw: bool = False,
    ):
        super().__init__()
        self.widths = tuple(widths)
        self.edge_channels = edge_channels
        self.condition_on_raw = condition_on_raw
        levels = len(widths)
        self.cross_levels = set(range(max(0, levels - cross_attn_levels), levels))
        temb_dim = widths[0] * 4
        self.temb_mlp = nn.Sequential(
            nn.Linear(widths[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        in_ch = 6 + (3 if condition_on_raw else 0)
        self.in_conv = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        self.edge_fuse = nn.Conv2d(widths[0] + edge_channels, widths[0], 1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = widths[0]
        for level, w in enumerate(widths):
            self.down_blocks.append(
                nn.ModuleList([ResBlock(ch if i == 0 else w, w, temb_dim) for i in range(blocks_per_level)])
            )
            self.down_attn.append(
                PromptCrossAttention(w, prompt_dim, heads) if level in self.cross_levels else None
            )
            ch = w
            if level < levels - 1:
                self.downs.append(nn.Conv2d(w, widths[level + 1], 3, stride=2, padding=1))
                ch = widths[level + 1]

        self.mid1 = ResBlock(widths[-1], widths[-1], temb_dim)
        self.mid_attn = PromptCrossAttention(widths[-1], prompt_dim, heads)
        self.mid2 = ResBlock(widths[-1], widths[-1], temb_dim)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.ups = nn.ModuleList()
        for level in range(levels - 1, -1, -1):
            w = widths[level]
            if level < levels - 1:
                self.ups.append(nn.Conv2d(widths[level + 1], w, 3, padding=1))
            self.up_blocks.append(
                nn.ModuleList(
                    [ResBlock(2 * w if i == 0 else w, w, temb_dim) for i in range(blocks_per_level)]
                )
            )
            self.up_attn.append(
                PromptCrossAttention(w, prompt_dim, heads) if level in self.cross_levels else None
            )

        self.out_norm = nn.GroupNorm(min(8, widths[0]), widths[0])
        self.out_conv = zero_module(nn.Conv2d(widths[0], 3, 3, padding=1))

    def forward(self, x_t, i_cond, t, tokens, p_e=None, i_raw=None):
        """All tensors batched; t is a (B,) long tensor; p_e is (B, C_e, H, W) or None."""
        temb = self.temb_mlp(timestep_embedding(t, self.widths[0]))
        parts = [x_t, i_cond]
        if self.condition_on_raw:
            parts.append(i_raw if i_raw is not None else torch.zeros_like(i_cond))
        h = self.in_conv(torch.cat(parts, dim=1))
        if p_e is None:
            p_e = x_t.new_zeros(x_t.shape[0], self.edge_channels, *x_t.shape[-2:])
        h = self.edge_fuse(torch.cat([h, p_e], dim=1))

        skips = []
        for level, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, temb)
            if self.down_attn[level] is not None:
                h = self.down_attn[level](h, tokens)
            skips.append(h)
            if level < len(self.widths) - 1:
                h = self.downs[level](h)

        h = self.mid1(h, temb)
        h = self.mid_attn(h, tokens)
        h = self.mid2(h, temb)

        for i, level in enumerate(range(len(self.widths) - 1, -1, -1)):
            if level < len(self.widths) - 1:
                h = self.ups[i - 1](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = torch.cat([h, skips[level]], dim=1)
            for block in self.up_blocks[i]:
                h = block(h, temb)
            if self.up_attn[i] is not None:
                h = self.up_attn[i](h, tokens)

        return self.out_conv(F.silu(self.out_norm(h)))


def denoiser_forward(inputs: DenoiserInputs, denoiser: ConditionalDenoiser) -> np.ndarray:
    """Single-example denoiser evaluation on the public (numpy) types."""
    with torch.no_grad():
        x_t = torch.from_numpy(np.asarray(inputs.x_t, dtype=np.float32)).permute(2, 0, 1)[None]
        cond = torch.from_numpy(inputs.i_lq.pixels).permute(2, 0, 1)[None]
        tokens = torch.from_numpy(inputs.p_p.tokens)[None]
        p_e = None
        if inputs.p_e is not None:
            p_e = torch.from_numpy(inputs.p_e.features)[None]
        t = torch.tensor([inputs.t], dtype=torch.long)
        out = denoiser(x_t, cond, t, tokens, p_e)
    return out[0].permute(1, 2, 0).numpy()


## training objective and sampler -------------------------------------------------------


def diffusion_loss(
    batch: dict[str, torch.Tensor],
    sched: DiffusionSchedule,
    denoiser: ConditionalDenoiser,
    generator: torch.Generator | None = None,
    weights: np.ndarray | None = None,
) -> torch.Tensor:
    """Monte-Carlo objective: uniform t, marginal noising, weighted MSE to the target.

    batch keys: x0, i_cond (B,3,H,W); tokens (B,N,D); optional p_e (B,C_e,H,W),
    i_raw. Weights default to 1 for every step.
    """
    x0, i_cond = batch["x0"], batch["i_cond"]
    b = x0.shape[0]
    t = torch.randint(1, sched.steps + 1, (b,), generator=generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    eta_t = torch.from_numpy(sched.eta).to(x0.dtype)[t].view(-1, 1, 1, 1)
    x_t = x0 + eta_t * (i_cond - x0) + sched.kappa * eta_t.sqrt() * noise
    pred = denoiser(x_t, i_cond, t, batch["tokens"], batch.get("p_e"), batch.get("i_raw"))
    per_sample = ((pred - x0) ** 2).mean(dim=(1, 2, 3))
    if weights is None:
        w_t = torch.ones(b, dtype=x0.dtype)
    else:
        w_t = torch.from_numpy(np.asarray(weights, dtype=np.float64)).to(x0.dtype)[t - 1]
    return (w_t * per_sample).mean()


def sample(
    i_coarse: ImagePatch,
    i_lq: ImagePatch,
    p_p: PathologyPrompt,
    p_e: EdgePrompt | None,
    sched: DiffusionSchedule,
    denoiser: ConditionalDenoiser,
    seed: int = 0,
    debug_callback=None,
) -> ImagePatch:
    """Run the reverse chain from the coarse image; deterministic given seed."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        cond = torch.from_numpy(i_coarse.pixels).permute(2, 0, 1)[None]
        tokens = torch.from_numpy(p_p.tokens)[None]
        pe = None if p_e is None else torch.from_numpy(p_e.features)[None]
        raw = torch.from_numpy(i_lq.pixels).permute(2, 0, 1)[None]
        noise = torch.randn(cond.shape, generator=gen, dtype=cond.dtype)
        x = cond + sched.kappa * math.sqrt(float(sched.eta[-1])) * noise
        for t in range(sched.steps, 0, -1):
            tt = torch.tensor([t], dtype=torch.long)
            x0_hat = denoiser(x, cond, tt, tokens, pe, raw)
            step_noise = torch.randn(cond.shape, generator=gen, dtype=cond.dtype)
            x = posterior_step(x, x0_hat, cond, t, step_noise, sched)
            if debug_callback is not None:
                debug_callback(t - 1, x[0].permute(1, 2, 0).numpy())
        out = torch.clamp(x, 0.0, 1.0)[0].permute(1, 2, 0).numpy()
    return ImagePatch(out, id=f"{i_lq.id}_fine")


def train_pdiffusion(
    data: dict[str, torch.Tensor],
    denoiser: ConditionalDenoiser,
    edge_embedder=None,
    total_steps: int = 2000,
    batch_size: int = 8,
    lr: float = 1e-4,
    warmup_frac: float = 0.1,
    sched: DiffusionSchedule | None = None,
    seed: int = 0,
    start_step: int = 0,
    optimizer_state: dict | None = None,
    log=None,
) -> dict:
    """Warmup + cosine-decay Adam training of the denoiser (and edge embedder).

    data keys: x0, i_cond (N,3,H,W); tokens (N,N_t,D); optional edge_mask
    (N,1,H,W) with confidence (N,1,H,W). Returns {history, step, optimizer}.
    """
    n = data["x0"].shape[0]
    if n == 0:
        raise ValidationError("empty diffusion training set")
    sched = sched or make_schedule()
    torch.manual_seed(seed)
    params = list(denoiser.parameters())
    if edge_embedder is not None:
        params += list(edge_embedder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    warmup = max(1, int(round(total_steps * warmup_frac)))

    def lr_at(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    history = []
    denoiser.train()
    for step in range(start_step, total_steps):
        for group in opt.param_groups:
            group["lr"] = lr * lr_at(step)
        idx = torch.from_numpy(np.random.default_rng([seed, step]).choice(n, size=min(batch_size, n), replace=False))
        batch = {
            "x0": data["x0"][idx],
            "i_cond": data["i_cond"][idx],
            "tokens": data["tokens"][idx],
        }
        if "i_raw" in data:
            batch["i_raw"] = data["i_raw"][idx]
        if edge_embedder is not None and "edge_mask" in data:
            batch["p_e"] = edge_embedder(data["edge_mask"][idx]) * data["confidence"][idx]
        gen = torch.Generator().manual_seed(hash((seed, step)) % 2**31)
        loss = diffusion_loss(batch, sched, denoiser, generator=gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss))
        if log is not None and (step + 1) % max(1, total_steps // 20) == 0:
            log(f"pdiffusion step {step + 1}/{total_steps} loss {history[-1]:.5f}")
    denoiser.eval()
    return {"history": history, "step": total_steps, "optimizer": opt.state_dict()}
