"""Image and focal-stack I/O, deterministic tiling, and feather-blended stitching.

Pixel currency throughout the package: float32 arrays of shape (H, W, 3),
RGB, values in [0, 1].
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import ValidationError

FEATHER_FLOOR = 1e-3
MIN_PATCH_DIM = 16


@dataclass
class ImagePatch:
    """A float RGB image in [0, 1] with an identifier."""

    pixels: np.ndarray
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        if px.shape[0] < MIN_PATCH_DIM or px.shape[1] < MIN_PATCH_DIM:
            raise ValidationError(
                f"patch must be at least {MIN_PATCH_DIM}px per side, got {px.shape[:2]}"
            )
        if not np.all(np.isfinite(px)):
            raise ValidationError("patch contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError(
                f"patch values outside [0, 1]: min={px.min():.4g} max={px.max():.4g}"
            )
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class FocalStack:
    """Co-registered planes at signed focal offsets plus the fused sharp image."""

    planes: list[tuple[float, ImagePatch]]
    fused: ImagePatch
    spacing_um: float = 0.0

    def __post_init__(self):
        offsets = [off for off, _ in self.planes]
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ValidationError(f"plane offsets must be strictly increasing, got {offsets}")
        shapes = {p.pixels.shape for _, p in self.planes} | {self.fused.pixels.shape}
        if len(shapes) != 1:
            raise ValidationError(f"all planes must share dimensions, got {sorted(shapes)}")

    @property
    def offsets(self) -> list[float]:
        return [off for off, _ in self.planes]


@dataclass(frozen=True)
class TileIndex:
    """Position of one tile inside a larger image."""

    row0: int
    col0: int
    tile_size: int
    stride: int

    def __post_init__(self):
        if not (self.tile_size >= self.stride >= 1):
            raise ValidationError(
                f"need tile_size >= stride >= 1, got tile_size={self.tile_size} stride={self.stride}"
            )


def load_image(path, id: str | None = None) -> ImagePatch:
    """Load an 8- or 16-bit RGB raster, normalized by its bit-depth maximum."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such image file: {path}")
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValidationError(f"could not decode image file: {path}")
    channels = 1 if raw.ndim == 2 else raw.shape[2]
    if channels != 3:
        raise ValidationError(f"expected a 3-channel RGB image, got {channels} channel(s): {path}")
    if raw.dtype == np.uint8:
        peak = 255.0
    elif raw.dtype == np.uint16:
        peak = 65535.0
    else:
        raise ValidationError(f"unsupported pixel dtype {raw.dtype}: {path}")
    rgb = raw[:, :, ::-1].astype(np.float32) / np.float32(peak)
    if id is None:
        id = os.path.splitext(os.path.basename(path))[0]
    return ImagePatch(rgb, id=id)


def save_image(patch: ImagePatch, path) -> None:
    """Write an 8-bit RGB PNG."""
    path = os.fspath(path)
    u8 = np.clip(np.rint(patch.pixels * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(path, u8[:, :, ::-1]):
        raise OSError(f"failed to write image: {path}")


def _cover_positions(dim: int, tile: int, stride: int) -> list[int]:
    starts = list(range(0, dim - tile + 1, stride))
    if starts[-1] != dim - tile:
        starts.append(dim - tile)  # clamp the last tile inward, never pad
    return starts


def tile_image(image: ImagePatch, tile_size: int, stride: int) -> list[tuple[TileIndex, ImagePatch]]:
    """Cut the image into tiles covering every pixel; edge tiles shift inward."""
    if stride < 1 or tile_size < stride:
        raise ValidationError(f"need tile_size >= stride >= 1, got {tile_size}, {stride}")
    h, w = image.height, image.width
    if h < tile_size or w < tile_size:
        raise ValidationError(
            f"image {h}x{w} is smaller than tile_size {tile_size}"
        )
    tiles = []
    for r0 in _cover_positions(h, tile_size, stride):
        for c0 in _cover_positions(w, tile_size, stride):
            idx = TileIndex(r0, c0, tile_size, stride)
            patch = ImagePatch(
                image.pixels[r0 : r0 + tile_size, c0 : c0 + tile_size].copy(),
                id=f"{image.id}_r{r0}_c{c0}",
            )
            tiles.append((idx, patch))
    return tiles


def feather_profile(length: int) -> np.ndarray:
    """1-D blend weight: 1 at the center, tapering linearly to FEATHER_FLOOR at the borders."""
    if length == 1:
        return np.ones(1)
    i = np.arange(length, dtype=np.float64)
    half = (length - 1) / 2.0
    t = np.minimum(i, length - 1 - i) / half
    return FEATHER_FLOOR + (1.0 - FEATHER_FLOOR) * t


def stitch_tiles(tiles: list[tuple[TileIndex, ImagePatch]], out_h: int, out_w: int) -> ImagePatch:
    """Blend tiles back into one image with separable linear feather weights.

    Per-pixel weights are renormalized so they sum to 1; accumulation runs in
    float64 so a single full-size tile reproduces its input bit-for-bit.
    """
    acc = np.zeros((out_h, out_w, 3), dtype=np.float64)
    wsum = np.zeros((out_h, out_w), dtype=np.float64)
    profiles: dict[int, np.ndarray] = {}
    for idx, patch in tiles:
        th, tw = patch.height, patch.width
        for length in (th, tw):
            if length not in profiles:
                profiles[length] = feather_profile(length)
        weight = np.outer(profiles[th], profiles[tw])
        r0, c0 = idx.row0, idx.col0
        acc[r0 : r0 + th, c0 : c0 + tw] += weight[:, :, None] * patch.pixels.astype(np.float64)
        wsum[r0 : r0 + th, c0 : c0 + tw] += weight
    if np.any(wsum == 0.0):
        r, c = np.argwhere(wsum == 0.0)[0]
        raise ValidationError(f"tiles do not cover the output: first uncovered pixel ({r}, {c})")
    out = (acc / wsum[:, :, None]).astype(np.float32)
    return ImagePatch(np.clip(out, 0.0, 1.0), id="stitched")


def _parse_record(line: str) -> dict[str, str]:
    fields = {}
    for token in line.split():
        if "=" not in token:
            raise ValidationError(f"malformed field (expected key=value): {token!r}")
        key, value = token.split("=", 1)
        fields[key] = value
    return fields


def load_manifest(path) -> list[FocalStack]:
    """Read a line-delimited focal-stack manifest.

    Each record is `fused=<path> spacing_um=<float> planes=<off>:<path>[,...]`;
    `#` begins a comment line. Paths are resolved relative to the manifest.
    """
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    stacks = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = _parse_record(line)
            for required in ("fused", "planes"):
                if required not in fields:
                    raise ValidationError(f"line {lineno}: missing field {required!r}")
            try:
                fused = load_image(os.path.join(base, fields["fused"]))
            except FileNotFoundError as exc:
                raise FileNotFoundError(f"line {lineno}: {exc}") from exc
            planes = []
            for entry in fields["planes"].split(","):
                if ":" not in entry:
                    raise ValidationError(f"line {lineno}: malformed plane entry {entry!r}")
                off_s, rel = entry.split(":", 1)
                try:
                    offset = float(off_s)
                except ValueError as exc:
                    raise ValidationError(f"line {lineno}: bad offset {off_s!r}") from exc
                try:
                    planes.append((offset, load_image(os.path.join(base, rel))))
                except FileNotFoundError as exc:
                    raise FileNotFoundError(f"line {lineno}: {exc}") from exc
            try:
                stack = FocalStack(
                    planes=planes,
                    fused=fused,
                    spacing_um=float(fields.get("spacing_um", 0.0)),
                )
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from exc
            stacks.append(stack)
    return stacks


def write_manifest(path, records: list[dict]) -> None:
    """Write manifest records; each dict has fused/spacing_um/planes keys."""
    with open(path, "w") as fh:
        fh.write("# focal-stack manifest: fused=<path> spacing_um=<float> planes=<off>:<path>,...\n")
        for rec in records:
            planes = ",".join(f"{off:g}:{rel}" for off, rel in rec["planes"])
            fh.write(f"fused={rec['fused']} spacing_um={rec['spacing_um']:g} planes={planes}\n")
