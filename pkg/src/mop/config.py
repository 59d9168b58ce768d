"""Pipeline configuration: nested dataclasses, YAML loading with unknown-key
rejection, and a canonical fingerprint."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .errors import ValidationError


@dataclass
class DataSection:
    field_hw: int = 128  # side of each simulated field of view
    train_patch: int = 64
    tile_size: int = 256  # inference tiling
    tile_stride: int = 224
    stacks: int = 24
    offsets: list = field(default_factory=lambda: [float(o) for o in range(-6, 7)])
    tilt: float = 0.0
    region: int = 32
    crops_per_plane: int = 1


@dataclass
class OpticsSection:
    sigma_per_plane: float = 0.75
    f_ref: float = 0.1
    kernel_radius_sigmas: float = 3.0


@dataclass
class DefocusSection:
    widths: list = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: int = 1
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    gamma: float = 0.95
    targets: str = "both"  # both | distance | ctf
    stain_augment: bool = False


@dataclass
class EncoderSection:
    name: str = "tiny-vit"
    patch: int = 16
    dim: int = 192
    depth: int = 4
    heads: int = 4
    pretrain_epochs: int = 3
    pretrain_lr: float = 1e-3


@dataclass
class PromptRestorerSection:
    blocks: int = 4
    heads: int = 4
    defocus_dim: int = 192
    epochs: int = 500
    batch_size: int = 16
    lr: float = 1e-4
    gamma: float = 0.98


@dataclass
class EdgesSection:
    low: float = 0.1
    high: float = 0.2
    channels: int = 16
    confidence_epochs: int = 20
    confidence_lr: float = 1e-2


@dataclass
class PFormerSection:
    widths: list = field(default_factory=lambda: [48, 96, 192, 384])
    blocks: list = field(default_factory=lambda: [2, 3, 3, 4])
    heads: list = field(default_factory=lambda: [1, 2, 4, 8])
    n_experts: int = 3
    expansion: float = 2.0
    refinement_blocks: int = 2
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-4
    gamma: float = 0.98


@dataclass
class PDiffusionSection:
    steps: int = 4
    kappa: float = 2.0
    eta1: float = 0.04
    widths: list = field(default_factory=lambda: [32, 64, 128, 256])
    blocks_per_level: int = 2
    heads: int = 4
    cross_attn_levels: int = 2
    condition_on_raw: bool = False
    total_steps: int = 100000
    warmup_frac: float = 0.1
    batch_size: int = 8
    lr: float = 1e-4


@dataclass
class MetricsSection:
    encoder: str = "tiny-vit"
    psnr_cap: float = 99.0


@dataclass
class RunSection:
    seed: int = 0
    num_threads: int = 0  # 0 = leave torch defaults


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    optics: OpticsSection = field(default_factory=OpticsSection)
    defocus: DefocusSection = field(default_factory=DefocusSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    prompt_restorer: PromptRestorerSection = field(default_factory=PromptRestorerSection)
    edges: EdgesSection = field(default_factory=EdgesSection)
    pformer: PFormerSection = field(default_factory=PFormerSection)
    pdiffusion: PDiffusionSection = field(default_factory=PDiffusionSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    run: RunSection = field(default_factory=RunSection)


def _from_mapping(cls, mapping, path=""):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ValidationError(f"config section {path or '<root>'} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(mapping) - set(names)
    if unknown:
        raise ValidationError(
            f"unknown config key(s) {sorted(unknown)} in section {path or '<root>'}"
        )
    kwargs = {}
    for key, value in mapping.items():
        f = names[key]
        factory = f.default_factory
        if factory is not dataclasses.MISSING and dataclasses.is_dataclass(factory):
            kwargs[key] = _from_mapping(factory, value, path=f"{path}.{key}".lstrip("."))
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(mapping: dict) -> PipelineConfig:
    return _from_mapping(PipelineConfig, mapping)


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Load a YAML config file; unknown keys are rejected. Overrides are nested dicts."""
    mapping: dict = {}
    if path is not None:
        with open(path) as fh:
            mapping = yaml.safe_load(fh) or {}
    if overrides:
        mapping = _deep_merge(mapping, overrides)
    return config_from_dict(mapping)


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def config_fingerprint(cfg: PipelineConfig) -> str:
    """Stable hash of the canonicalized config (key order never matters)."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def desk_profile() -> dict:
    """Override dict sized for minutes-scale CPU training (tests and demos)."""
    return {
        "data": {"field_hw": 64, "stacks": 24},
        "defocus": {"widths": [8, 16, 32, 48], "epochs": 12},
        "encoder": {"pretrain_epochs": 2},
        "prompt_restorer": {"epochs": 40},
        "pformer": {
            "widths": [16, 32, 64],
            "blocks": [1, 1, 2],
            "heads": [1, 2, 4],
            "refinement_blocks": 1,
            "epochs": 30,
        },
        "pdiffusion": {
            "widths": [16, 32, 64],
            "blocks_per_level": 1,
            "total_steps": 3000,
        },
    }
