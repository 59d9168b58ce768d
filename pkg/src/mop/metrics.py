"""Distortion and perceptual metrics plus dataset-level evaluation reports."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .encoders import PathologyPrompt
from .errors import ValidationError
from .imgio import ImagePatch, load_image

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: ImagePatch, b: ImagePatch) -> float:
    """10 log10(1 / MSE) with peak 1.0, capped at 99 dB (zero MSE reports the cap)."""
    if a.pixels.shape != b.pixels.shape:
        raise ValidationError(f"shape mismatch: {a.pixels.shape} vs {b.pixels.shape}")
    mse = float(np.mean((a.pixels.astype(np.float64) - b.pixels.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    oh, ow = img.shape[0] - kh + 1, img.shape[1] - kw + 1
    out = np.zeros((oh, ow), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            out += kernel[u, v] * img[u : u + oh, v : v + ow]
    return out


def ssim(a: ImagePatch, b: ImagePatch) -> float:
    """Single-scale SSIM: 11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03, peak 1.

    Computed on the valid interior per channel, then averaged.
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValidationError(f"shape mismatch: {a.pixels.shape} vs {b.pixels.shape}")
    if min(a.height, a.width) < SSIM_WINDOW:
        raise ValidationError(f"images must be at least {SSIM_WINDOW}px per side for SSIM")
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    values = []
    for ch in range(3):
        x = a.pixels[:, :, ch].astype(np.float64)
        y = b.pixels[:, :, ch].astype(np.float64)
        mu_x = _filter_valid(x, window)
        mu_y = _filter_valid(y, window)
        var_x = _filter_valid(x * x, window) - mu_x**2
        var_y = _filter_valid(y * y, window) - mu_y**2
        cov = _filter_valid(x * y, window) - mu_x * mu_y
        score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        )
        values.append(score.mean())
    return float(np.mean(values))


def perceptual_proxy(a: ImagePatch, b: ImagePatch, encoder) -> float:
    """Mean squared distance between unit-normalized token sets of a frozen encoder."""
    ta = _unit_tokens(encoder.encode(a))
    tb = _unit_tokens(encoder.encode(b))
    return float(np.mean((ta - tb) ** 2))


def _unit_tokens(prompt: PathologyPrompt) -> np.ndarray:
    t = prompt.tokens.astype(np.float64)
    return t / (np.linalg.norm(t, axis=1, keepdims=True) + 1e-12)


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    perceptual: float
    per_slide: dict[str, tuple[float, float, float]] = field(default_factory=dict)


def _load_eval_manifest(path) -> dict[str, dict]:
    base = os.path.dirname(os.path.abspath(os.fspath(path)))
    entries: dict[str, dict] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = {}
            for token in line.split():
                if "=" not in token:
                    raise ValidationError(f"line {lineno}: malformed field {token!r}")
                k, v = token.split("=", 1)
                fields[k] = v
            if "id" not in fields or "path" not in fields:
                raise ValidationError(f"line {lineno}: need id= and path= fields")
            entries[fields["id"]] = {
                "path": os.path.join(base, fields["path"]),
                "slide": fields.get("slide", fields["id"]),
            }
    return entries


def evaluate_dataset(
    predictions_manifest,
    references_manifest,
    encoder,
    group_by_slide: bool = True,
    out_path=None,
) -> MetricReport:
    """Score paired prediction/reference manifests; metrics aggregate per slide.

    Manifests are line-delimited `id=<id> path=<png> [slide=<slide>]` records.
    """
    preds = _load_eval_manifest(predictions_manifest)
    refs = _load_eval_manifest(references_manifest)
    for pid in preds:
        if pid not in refs:
            raise ValidationError(f"prediction id {pid!r} has no matching reference")
    for rid in refs:
        if rid not in preds:
            raise ValidationError(f"reference id {rid!r} has no matching prediction")
    if not preds:
        raise ValidationError("empty evaluation manifests")

    groups: dict[str, list[str]] = {}
    for pid, entry in preds.items():
        key = entry["slide"] if group_by_slide else pid
        groups.setdefault(key, []).append(pid)

    per_slide = {}
    for slide, ids in sorted(groups.items()):
        triples = []
        for pid in ids:
            p = load_image(preds[pid]["path"])
            r = load_image(refs[pid]["path"])
            triples.append((psnr(p, r), ssim(p, r), perceptual_proxy(p, r, encoder)))
        per_slide[slide] = tuple(float(np.mean([t[i] for t in triples])) for i in range(3))

    agg = tuple(float(np.mean([v[i] for v in per_slide.values()])) for i in range(3))
    report = MetricReport(psnr=agg[0], ssim=agg[1], perceptual=agg[2], per_slide=per_slide)
    if out_path is not None:
        write_report(report, out_path)
    return report


def write_report(report: MetricReport, path) -> None:
    """Aligned text table plus a machine-readable line-record file alongside it."""
    path = os.fspath(path)
    rows = [("slide", "psnr_db", "ssim", "perceptual")]
    for slide, (p, s, l) in sorted(report.per_slide.items()):
        rows.append((slide, f"{p:.4f}", f"{s:.6f}", f"{l:.6f}"))
    rows.append(("MEAN", f"{report.psnr:.4f}", f"{report.ssim:.6f}", f"{report.perceptual:.6f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    with open(path, "w") as fh:
        for row in rows:
            fh.write("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() + "\n")
    with open(path + ".records", "w") as fh:
        for slide, (p, s, l) in sorted(report.per_slide.items()):
            fh.write(f"slide={slide} psnr={p:.6f} ssim={s:.6f} perceptual={l:.6f}\n")
        fh.write(
            f"slide=__mean__ psnr={report.psnr:.6f} ssim={report.ssim:.6f} "
            f"perceptual={report.perceptual:.6f}\n"
        )
