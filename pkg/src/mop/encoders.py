"""Pluggable image encoders producing token-sequence prompts.

The default `tiny-vit` is a small vision transformer pre-trained in-repo on a
blur-bucket classification proxy task and then frozen; a sidecar adapter can
inject externally computed tokens instead.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ValidationError
from .imgio import ImagePatch
from .layers import sincos_pos_embed_2d

TINY_VIT_PATCH = 16
TINY_VIT_DIM = 192
TINY_VIT_DEPTH = 4
TINY_VIT_HEADS = 4


@dataclass
class PathologyPrompt:
    """Patch-token sequence (N, D) plus its mean-pooled vector."""

    tokens: np.ndarray
    pooled: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float32)
        p = np.asarray(self.pooled, dtype=np.float32)
        if t.ndim != 2 or p.shape != (t.shape[1],):
            raise ValidationError(f"bad prompt shapes: tokens {t.shape}, pooled {p.shape}")
        if not (np.isfinite(t).all() and np.isfinite(p).all()):
            raise ValidationError("prompt contains non-finite values")
        self.tokens, self.pooled = t, p

    @classmethod
    def from_tokens(cls, tokens: np.ndarray) -> "PathologyPrompt":
        tokens = np.asarray(tokens, dtype=np.float32)
        return cls(tokens=tokens, pooled=tokens.mean(axis=0))


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    patch: int
    dim: int
    frozen: bool


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TinyViT(nn.Module):
    """Patch-embedding transformer over 16x16 patches with sincos positions."""

    def __init__(
        self,
        patch: int = TINY_VIT_PATCH,
        dim: int = TINY_VIT_DIM,
        depth: int = TINY_VIT_DEPTH,
        heads: int = TINY_VIT_HEADS,
        n_classes: int = 7,
        name: str = "tiny-vit",
    ):
        super().__init__()
        self.spec = EncoderSpec(name=name, patch=patch, dim=dim, frozen=False)
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.cls_head = nn.Linear(dim, n_classes)  # proxy-task head, unused after freezing

    def forward_tokens(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        tokens = tokens + sincos_pos_embed_2d(h // self.spec.patch, w // self.spec.patch, tokens.shape[-1])[None]
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.cls_head(self.forward_tokens(x).mean(dim=1))

    def freeze(self) -> "TinyViT":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.spec = EncoderSpec(self.spec.name, self.spec.patch, self.spec.dim, frozen=True)
        return self

    @torch.no_grad()
    def encode(self, image: ImagePatch) -> PathologyPrompt:
        _check_dims(image, self.spec)
        was_training = self.training
        self.eval()
        x = torch.from_numpy(image.pixels).permute(2, 0, 1)[None]
        tokens = self.forward_tokens(x)[0].numpy()
        if was_training and not self.spec.frozen:
            self.train()
        return PathologyPrompt.from_tokens(tokens)


class SidecarEncoder:
    """Adapter serving tokens precomputed offline into `<image-id>.tok` files."""

    def __init__(self, directory, dim: int, patch: int = TINY_VIT_PATCH, name: str = "sidecar"):
        self.directory = os.fspath(directory)
        self.spec = EncoderSpec(name=name, patch=patch, dim=dim, frozen=True)

    def encode(self, image: ImagePatch) -> PathologyPrompt:
        _check_dims(image, self.spec)
        path = os.path.join(self.directory, f"{image.id}.tok")
        tokens = read_tokens(path)
        expected = (image.height // self.spec.patch) * (image.width // self.spec.patch)
        if tokens.shape != (expected, self.spec.dim):
            raise ValidationError(
                f"sidecar tokens for {image.id!r} have shape {tokens.shape}, "
                f"expected ({expected}, {self.spec.dim})"
            )
        return PathologyPrompt.from_tokens(tokens)


def _check_dims(image: ImagePatch, spec: EncoderSpec) -> None:
    if image.height % spec.patch or image.width % spec.patch:
        raise ValidationError(
            f"image dims {image.height}x{image.width} not divisible by patch {spec.patch}"
        )


def encode(image: ImagePatch, encoder) -> PathologyPrompt:
    """Run an encoder instance on an image patch."""
    return encoder.encode(image)


## registry ---------------------------------------------------------------------------

_REGISTRY: dict[str, tuple[EncoderSpec, object]] = {}


def register_encoder(spec: EncoderSpec, factory) -> None:
    if spec.name in _REGISTRY:
        raise ValidationError(f"encoder {spec.name!r} is already registered")
    _REGISTRY[spec.name] = (spec, factory)


def list_encoders() -> list[EncoderSpec]:
    return [spec for spec, _ in _REGISTRY.values()]


def get_encoder(name: str, **kwargs):
    if name not in _REGISTRY:
        available = ", ".join(sorted(_REGISTRY)) or "<none>"
        raise ValidationError(f"unknown encoder {name!r}; available: {available}")
    _, factory = _REGISTRY[name]
    return factory(**kwargs)


def _tiny_vit_factory(seed: int = 0) -> TinyViT:
    torch.manual_seed(seed)
    return TinyViT()


register_encoder(
    EncoderSpec(name="tiny-vit", patch=TINY_VIT_PATCH, dim=TINY_VIT_DIM, frozen=True),
    _tiny_vit_factory,
)


## sidecar token files ----------------------------------------------------------------


def write_tokens(path, tokens: np.ndarray) -> None:
    """Binary token record: uint32 N_t, uint32 D_p, then float32 tokens (little-endian)."""
    tokens = np.ascontiguousarray(tokens, dtype="<f4")
    if tokens.ndim != 2:
        raise ValidationError(f"tokens must be (N, D), got shape {tokens.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", tokens.shape[0], tokens.shape[1]))
        fh.write(tokens.tobytes())


def read_tokens(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise ValidationError(f"truncated token file: {path}")
        n, d = struct.unpack("<II", header)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n * d:
        raise ValidationError(f"token file {path} holds {data.size} floats, expected {n * d}")
    return data.reshape(n, d).astype(np.float32)


## proxy-task pretraining --------------------------------------------------------------


def pretrain_encoder(
    model: TinyViT,
    patches: np.ndarray,
    buckets: np.ndarray,
    epochs: int = 3,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    log=None,
) -> list[float]:
    """Briefly train the encoder to classify blur buckets, then freeze it.

    patches: (N, H, W, 3); buckets: (N,) integer blur classes.
    """
    if len(patches) == 0:
        raise ValidationError("empty encoder pretraining set")
    torch.manual_seed(seed)
    x = torch.from_numpy(np.ascontiguousarray(patches.transpose(0, 3, 1, 2)))
    y = torch.from_numpy(buckets.astype(np.int64))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    n = len(x)
    model.train()
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        for i0 in range(0, n, batch_size):
            idx = order[i0 : i0 + batch_size]
            logits = model(x[idx])
            loss = nn.functional.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
        history.append(total / n)
        if log is not None:
            log(f"encoder epoch {epoch + 1}/{epochs} loss {history[-1]:.4f}")
    model.freeze()
    return history
