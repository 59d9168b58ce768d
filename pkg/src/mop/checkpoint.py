"""Versioned checkpoint container with a config-fingerprint guard."""

from __future__ import annotations

import os

import torch

from .errors import ValidationError

FORMAT_VERSION = 1


def save_checkpoint(
    path,
    component: str,
    config_fingerprint: str,
    state: dict,
    counters: dict | None = None,
    extra: dict | None = None,
) -> None:
    """Write format version, component name, fingerprint, parameters, and counters.

    `state` maps module names to state_dicts (or plain tensor maps).
    """
    payload = {
        "format_version": FORMAT_VERSION,
        "component": component,
        "config_fingerprint": config_fingerprint,
        "state": state,
        "counters": counters or {},
        "extra": extra or {},
    }
    os.makedirs(os.path.dirname(os.path.abspath(os.fspath(path))), exist_ok=True)
    torch.save(payload, os.fspath(path))


def load_checkpoint(
    path,
    component: str | None = None,
    config_fingerprint: str | None = None,
    allow_mismatch: bool = False,
) -> dict:
    """Load and validate a checkpoint; fingerprint mismatches raise unless allowed."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"checkpoint {path} has format version {payload.get('format_version')}, "
            f"expected {FORMAT_VERSION}"
        )
    if component is not None and payload["component"] != component:
        raise ValidationError(
            f"checkpoint {path} holds component {payload['component']!r}, expected {component!r}"
        )
    if (
        config_fingerprint is not None
        and payload["config_fingerprint"] != config_fingerprint
        and not allow_mismatch
    ):
        raise ValidationError(
            f"checkpoint {path} was produced under config fingerprint "
            f"{payload['config_fingerprint'][:12]}..., current is {config_fingerprint[:12]}... "
            "(pass allow_mismatch to load anyway)"
        )
    return payload
