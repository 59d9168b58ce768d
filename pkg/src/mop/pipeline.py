"""End-to-end orchestration: simulation, staged training, restoration,
evaluation, and diagnostics built from the component modules.

A run directory produced by `simulate` holds images/, labels/, manifest.txt;
training stages add checkpoints/, cache/, logs/; restoration adds restored/.
"""

from __future__ import annotations

import json
import math
import os
import subprocess
import time
from contextlib import contextmanager

import cv2
import numpy as np
import torch

from . import degrade, edges, metrics, pdiffusion, pformer, prompt_restoration
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig, config_fingerprint
from .defocus import DefocusEstimator, train_defocus
from .degrade import OpticsParams, synth_focal_stack
from .edges import ConfidenceHead, EdgeEmbedder, canny
from .encoders import TinyViT, pretrain_encoder
from .errors import DependencyError, ValidationError
from .imgio import ImagePatch, load_image, load_manifest, save_image, stitch_tiles, tile_image, write_manifest
from .pdiffusion import ConditionalDenoiser, make_schedule, sample, train_pdiffusion
from .pformer import PFormer, PFormerConfig, train_pformer
from .prompt_restoration import PromptRestorer, PromptRestorerConfig, train_prompt_restorer
from .textures import procedural_tissue

TRAIN_COMPONENTS = ("defocus", "prompt", "pformer", "pdiffusion")


## run bookkeeping ---------------------------------------------------------------------


@contextmanager
def output_lock(out_dir):
    """One pipeline run owns its output directory exclusively."""
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValidationError(
            f"output directory {out_dir} is locked by another run (remove {lock_path} if stale)"
        )
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(lock_path)


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def write_run_record(out_dir, command: str, cfg: PipelineConfig, seed: int, started: float) -> None:
    with open(os.path.join(out_dir, "run-record.txt"), "w") as fh:
        fh.write(f"command={command}\n")
        fh.write(f"config_fingerprint={config_fingerprint(cfg)}\n")
        fh.write(f"seed={seed}\n")
        fh.write(f"git_describe={_git_describe()}\n")
        fh.write(f"duration_s={time.time() - started:.3f}\n")


def _optics(cfg: PipelineConfig) -> OpticsParams:
    o = cfg.optics
    return OpticsParams(o.sigma_per_plane, o.f_ref, o.kernel_radius_sigmas)


def _apply_threads(cfg: PipelineConfig) -> None:
    if cfg.run.num_threads > 0:
        torch.set_num_threads(cfg.run.num_threads)


## simulation ---------------------------------------------------------------------------


def write_labels(path, d_map: np.ndarray, c_map: np.ndarray) -> None:
    rows, cols = d_map.shape
    with open(path, "w") as fh:
        fh.write(f"# rows={rows} cols={cols} one 'd c' pair per region, row-major\n")
        for r in range(rows):
            for c in range(cols):
                fh.write(f"{d_map[r, c]:.9g} {c_map[r, c]:.9g}\n")


def read_labels(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValidationError(f"label file {path} lacks its header line")
        meta = dict(tok.split("=") for tok in header[1:].split() if "=" in tok)
        rows, cols = int(meta["rows"]), int(meta["cols"])
        data = np.loadtxt(fh, dtype=np.float64).reshape(rows, cols, 2)
    return data[:, :, 0], data[:, :, 1]


def run_simulate(cfg: PipelineConfig, out_dir, seed: int | None = None) -> str:
    """Generate focal stacks from procedural textures; write manifest + label sidecars."""
    seed = cfg.run.seed if seed is None else seed
    img_dir = os.path.join(out_dir, "images")
    lbl_dir = os.path.join(out_dir, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lbl_dir, exist_ok=True)
    params = _optics(cfg)
    offsets = [float(o) for o in cfg.data.offsets]
    records = []
    for i in range(cfg.data.stacks):
        rng = np.random.default_rng([seed, i])
        sharp = ImagePatch(
            procedural_tissue(cfg.data.field_hw, cfg.data.field_hw, rng), id=f"stack{i:04d}"
        )
        stack, labels = synth_focal_stack(sharp, offsets, params, cfg.data.tilt)
        fused_rel = f"images/{sharp.id}_fused.png"
        save_image(stack.fused, os.path.join(out_dir, fused_rel))
        plane_entries = []
        for j, ((offset, patch), (d_map, c_map)) in enumerate(zip(stack.planes, labels)):
            stem = f"{sharp.id}_plane{j:02d}"
            rel = f"images/{stem}.png"
            save_image(patch, os.path.join(out_dir, rel))
            write_labels(os.path.join(lbl_dir, f"{stem}.lbl"), d_map, c_map)
            plane_entries.append((offset, rel))
        records.append({"fused": fused_rel, "spacing_um": 0.8, "planes": plane_entries})
    manifest_path = os.path.join(out_dir, "manifest.txt")
    write_manifest(manifest_path, records)
    return manifest_path


## dataset assembly ---------------------------------------------------------------------


def _require_manifest(out_dir) -> str:
    path = os.path.join(out_dir, "manifest.txt")
    if not os.path.exists(path):
        raise DependencyError(f"no manifest in {out_dir}; run the `simulate` stage first")
    return path


def _crop_positions(field: int, patch: int, region: int, count: int, rng) -> list[tuple[int, int]]:
    if field == patch:
        return [(0, 0)] * count
    max_block = (field - patch) // region
    return [
        (int(rng.integers(0, max_block + 1)) * region, int(rng.integers(0, max_block + 1)) * region)
        for _ in range(count)
    ]


def build_defocus_dataset(
    out_dir,
    cfg: PipelineConfig,
    seed: int,
    nonnegative_only: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """(patch, d, c) triples from the simulated stacks.

    The symmetric synthetic PSF makes the defocus sign unidentifiable from a
    single patch, so estimator datasets keep planes at nonnegative offsets.
    """
    manifest = _require_manifest(out_dir)
    stacks = load_manifest(manifest)
    lbl_dir = os.path.join(out_dir, "labels")
    patch = cfg.data.train_patch
    region = cfg.data.region
    patches, labels = [], []
    rng = np.random.default_rng([seed, 7001])
    for stack in stacks:
        for j, (offset, plane) in enumerate(stack.planes):
            if nonnegative_only and offset < 0:
                continue
            d_map, c_map = read_labels(os.path.join(lbl_dir, f"{plane.id}.lbl"))
            for r0, c0 in _crop_positions(plane.height, patch, region, cfg.data.crops_per_plane, rng):
                br, bc = r0 // region, c0 // region
                nb = patch // region
                d = float(d_map[br : br + nb, bc : bc + nb].mean())
                c = float(c_map[br : br + nb, bc : bc + nb].mean())
                patches.append(plane.pixels[r0 : r0 + patch, c0 : c0 + patch])
                labels.append((d, c))
    return np.stack(patches), np.array(labels, dtype=np.float32)


def build_pair_dataset(out_dir, cfg: PipelineConfig, seed: int) -> dict[str, np.ndarray]:
    """Paired (degraded plane crop, fused crop) patches with their mean |d|."""
    manifest = _require_manifest(out_dir)
    stacks = load_manifest(manifest)
    lbl_dir = os.path.join(out_dir, "labels")
    patch = cfg.data.train_patch
    region = cfg.data.region
    lq, hq, dist, ids = [], [], [], []
    rng = np.random.default_rng([seed, 7002])
    for stack in stacks:
        for j, (offset, plane) in enumerate(stack.planes):
            d_map, _ = read_labels(os.path.join(lbl_dir, f"{plane.id}.lbl"))
            for r0, c0 in _crop_positions(plane.height, patch, region, cfg.data.crops_per_plane, rng):
                br, bc = r0 // region, c0 // region
                nb = patch // region
                lq.append(plane.pixels[r0 : r0 + patch, c0 : c0 + patch])
                hq.append(stack.fused.pixels[r0 : r0 + patch, c0 : c0 + patch])
                dist.append(abs(float(d_map[br : br + nb, bc : bc + nb].mean())))
                ids.append(plane.id)
    return {
        "lq": np.stack(lq),
        "hq": np.stack(hq),
        "d": np.array(dist, dtype=np.float32),
        "ids": np.array(ids),
    }


## batched model evaluation --------------------------------------------------------------


@torch.no_grad()
def batched_defocus(model: DefocusEstimator, patches: np.ndarray, bs: int = 64):
    model.eval()
    preds, feats = [], []
    for i0 in range(0, len(patches), bs):
        x = torch.from_numpy(np.ascontiguousarray(patches[i0 : i0 + bs].transpose(0, 3, 1, 2)))
        p, f = model(x)
        preds.append(p.numpy())
        feats.append(f.numpy())
    return np.concatenate(preds), np.concatenate(feats)


@torch.no_grad()
def batched_encode(encoder: TinyViT, patches: np.ndarray, bs: int = 64) -> np.ndarray:
    encoder.eval()
    out = []
    for i0 in range(0, len(patches), bs):
        x = torch.from_numpy(np.ascontiguousarray(patches[i0 : i0 + bs].transpose(0, 3, 1, 2)))
        out.append(encoder.forward_tokens(x).numpy())
    return np.concatenate(out)


@torch.no_grad()
def batched_restore_prompts(model: PromptRestorer, p_lp: np.ndarray, p_d: np.ndarray, bs: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for i0 in range(0, len(p_lp), bs):
        out.append(
            model(
                torch.from_numpy(p_lp[i0 : i0 + bs]), torch.from_numpy(p_d[i0 : i0 + bs])
            ).numpy()
        )
    return np.concatenate(out)


@torch.no_grad()
def batched_pformer(model: PFormer, lq: np.ndarray, prompts: np.ndarray, bs: int = 16) -> np.ndarray:
    model.eval()
    out = []
    for i0 in range(0, len(lq), bs):
        x = torch.from_numpy(np.ascontiguousarray(lq[i0 : i0 + bs].transpose(0, 3, 1, 2)))
        p = torch.from_numpy(prompts[i0 : i0 + bs])
        out.append(model(x, p).permute(0, 2, 3, 1).numpy())
    return np.concatenate(out)


@torch.no_grad()
def batched_confidence(head: ConfidenceHead, feats: np.ndarray, target_hw, bs: int = 64) -> np.ndarray:
    out = []
    for i0 in range(0, len(feats), bs):
        out.append(head(torch.from_numpy(feats[i0 : i0 + bs]), target_hw).numpy())
    return np.concatenate(out)


def canny_masks(patches: np.ndarray, low: float, high: float) -> np.ndarray:
    masks = [canny(ImagePatch(p, id=str(i)), low, high).mask for i, p in enumerate(patches)]
    return np.stack(masks)[:, None].astype(np.float32)


## model construction -------------------------------------------------------------------


def _build_estimator(cfg: PipelineConfig) -> DefocusEstimator:
    return DefocusEstimator(tuple(cfg.defocus.widths), cfg.defocus.blocks_per_stage)


def _build_encoder(cfg: PipelineConfig) -> TinyViT:
    e = cfg.encoder
    torch.manual_seed(cfg.run.seed)
    return TinyViT(patch=e.patch, dim=e.dim, depth=e.depth, heads=e.heads)


def _build_restorer(cfg: PipelineConfig) -> PromptRestorer:
    pr = cfg.prompt_restorer
    rcfg = PromptRestorerConfig(pr.blocks, pr.heads, cfg.encoder.dim, pr.defocus_dim)
    torch.manual_seed(cfg.run.seed)
    return PromptRestorer(rcfg, defocus_channels=cfg.defocus.widths[-1])


def _build_pformer(cfg: PipelineConfig) -> PFormer:
    p = cfg.pformer
    torch.manual_seed(cfg.run.seed)
    return PFormer(
        PFormerConfig(
            tuple(p.widths),
            tuple(p.blocks),
            tuple(p.heads),
            p.n_experts,
            cfg.encoder.dim,
            p.expansion,
            p.refinement_blocks,
        )
    )


def _build_denoiser(cfg: PipelineConfig) -> ConditionalDenoiser:
    d = cfg.pdiffusion
    torch.manual_seed(cfg.run.seed)
    return ConditionalDenoiser(
        widths=tuple(d.widths),
        blocks_per_level=d.blocks_per_level,
        prompt_dim=cfg.encoder.dim,
        edge_channels=cfg.edges.channels,
        cross_attn_levels=d.cross_attn_levels,
        heads=d.heads,
        condition_on_raw=d.condition_on_raw,
    )


def _ckpt_path(out_dir, component: str) -> str:
    return os.path.join(out_dir, "checkpoints", f"{component}.pt")


def _load_stage(out_dir, component: str, needed_by: str):
    path = _ckpt_path(out_dir, component)
    if not os.path.exists(path):
        raise DependencyError(
            f"stage {needed_by!r} needs the {component!r} checkpoint; run `mop train {component}` first"
            if component in TRAIN_COMPONENTS
            else f"stage {needed_by!r} needs the {component!r} artifact"
        )
    return load_checkpoint(path, component=component)


## training stages -----------------------------------------------------------------------


def _train_defocus_stage(cfg, out_dir, seed, fingerprint, epochs, log):
    patches, labels = build_defocus_dataset(out_dir, cfg, seed)
    model = _build_estimator(cfg)
    torch.manual_seed(seed)
    history = train_defocus(
        patches,
        labels,
        model,
        epochs=epochs or cfg.defocus.epochs,
        batch_size=cfg.defocus.batch_size,
        lr=cfg.defocus.lr,
        gamma=cfg.defocus.gamma,
        targets=cfg.defocus.targets,
        seed=seed,
        log=log,
    )
    conf_head = fit_confidence_head(model, patches, labels, cfg, seed, log=log)
    path = _ckpt_path(out_dir, "defocus")
    save_checkpoint(
        path,
        "defocus",
        fingerprint,
        state={"model": model.state_dict(), "confidence": conf_head.state_dict()},
        counters={"epochs": epochs or cfg.defocus.epochs},
        extra={"loss_history": history},
    )
    return path


def fit_confidence_head(
    model: DefocusEstimator, patches: np.ndarray, labels: np.ndarray, cfg, seed, log=None
) -> ConfidenceHead:
    """Fit the 1x1 confidence head so sigmoid(conv(P_D)) tracks the contrast label."""
    _, feats = batched_defocus(model, patches)
    head = ConfidenceHead(model.feature_channels)
    x = torch.from_numpy(feats)
    target = torch.from_numpy(labels[:, 1]).view(-1, 1, 1, 1).expand(-1, 1, x.shape[2], x.shape[3])
    opt = torch.optim.Adam(head.parameters(), lr=cfg.edges.confidence_lr)
    torch.manual_seed(seed)
    for epoch in range(cfg.edges.confidence_epochs):
        conf = torch.sigmoid(head.conv(x))
        loss = ((conf - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None and epoch == cfg.edges.confidence_epochs - 1:
            log(f"confidence-head final loss {float(loss):.5f}")
    return head


def _prompt_arrays(out_dir, cfg, seed, estimator, encoder):
    """Cached (P_LP, P_D, P_HP, pooled ids...) arrays for the simulated pairs."""
    cache = os.path.join(out_dir, "cache", "prompts.npz")
    if os.path.exists(cache):
        data = np.load(cache, allow_pickle=True)
        return {k: data[k] for k in data.files}
    pairs = build_pair_dataset(out_dir, cfg, seed)
    _, p_d = batched_defocus(estimator, pairs["lq"])
    p_lp = batched_encode(encoder, pairs["lq"])
    p_hp = batched_encode(encoder, pairs["hq"])
    out = {
        "lq": pairs["lq"],
        "hq": pairs["hq"],
        "d": pairs["d"],
        "p_d": p_d,
        "p_lp": p_lp,
        "p_hp": p_hp,
    }
    os.makedirs(os.path.dirname(cache), exist_ok=True)
    np.savez(cache, **out)
    return out


def _train_prompt_stage(cfg, out_dir, seed, fingerprint, epochs, log):
    ck = _load_stage(out_dir, "defocus", "prompt")
    estimator = _build_estimator(cfg)
    estimator.load_state_dict(ck["state"]["model"])

    enc_path = _ckpt_path(out_dir, "encoder")
    encoder = _build_encoder(cfg)
    if os.path.exists(enc_path):
        encoder.load_state_dict(load_checkpoint(enc_path, component="encoder")["state"]["model"])
        encoder.freeze()
    else:
        patches, labels = build_defocus_dataset(out_dir, cfg, seed, nonnegative_only=False)
        buckets = np.clip(np.rint(np.abs(labels[:, 0])), 0, 6).astype(np.int64)
        pretrain_encoder(
            encoder,
            patches,
            buckets,
            epochs=cfg.encoder.pretrain_epochs,
            lr=cfg.encoder.pretrain_lr,
            seed=seed,
            log=log,
        )
        save_checkpoint(
            enc_path,
            "encoder",
            fingerprint,
            state={"model": encoder.state_dict()},
            counters={"epochs": cfg.encoder.pretrain_epochs},
        )

    arrays = _prompt_arrays(out_dir, cfg, seed, estimator, encoder)
    model = _build_restorer(cfg)
    history = train_prompt_restorer(
        arrays["p_lp"],
        arrays["p_d"],
        arrays["p_hp"],
        model,
        epochs=epochs or cfg.prompt_restorer.epochs,
        batch_size=cfg.prompt_restorer.batch_size,
        lr=cfg.prompt_restorer.lr,
        gamma=cfg.prompt_restorer.gamma,
        seed=seed,
        log=log,
    )
    path = _ckpt_path(out_dir, "prompt")
    save_checkpoint(
        path,
        "prompt",
        fingerprint,
        state={"model": model.state_dict()},
        counters={"epochs": epochs or cfg.prompt_restorer.epochs},
        extra={"loss_history": history},
    )
    return path


def _restored_prompt_tokens(out_dir, cfg, seed, log):
    """P_P tokens for every training pair, computed through the trained restorer."""
    ck_d = _load_stage(out_dir, "defocus", "pformer")
    ck_p = _load_stage(out_dir, "prompt", "pformer")
    estimator = _build_estimator(cfg)
    estimator.load_state_dict(ck_d["state"]["model"])
    encoder = _build_encoder(cfg)
    encoder.load_state_dict(
        _load_stage(out_dir, "encoder", "pformer")["state"]["model"]
    )
    encoder.freeze()
    restorer = _build_restorer(cfg)
    restorer.load_state_dict(ck_p["state"]["model"])
    arrays = _prompt_arrays(out_dir, cfg, seed, estimator, encoder)
    p_p = batched_restore_prompts(restorer, arrays["p_lp"], arrays["p_d"])
    return arrays, p_p, estimator, ck_d


def _train_pformer_stage(cfg, out_dir, seed, fingerprint, epochs, log):
    arrays, p_p, _, _ = _restored_prompt_tokens(out_dir, cfg, seed, log)
    model = _build_pformer(cfg)
    history, utilization = train_pformer(
        arrays["lq"],
        arrays["hq"],
        p_p.mean(axis=1),
        model,
        epochs=epochs or cfg.pformer.epochs,
        batch_size=cfg.pformer.batch_size,
        lr=cfg.pformer.lr,
        gamma=cfg.pformer.gamma,
        seed=seed,
        log=log,
    )
    logs_dir = os.path.join(out_dir, "logs")
    os.makedirs(logs_dir, exist_ok=True)
    with open(os.path.join(logs_dir, "pformer_utilization.jsonl"), "w") as fh:
        for epoch, util in enumerate(utilization):
            for block, weights in sorted(util.items()):
                fh.write(json.dumps({"epoch": epoch, "block": block, "weights": list(map(float, weights))}) + "\n")
    path = _ckpt_path(out_dir, "pformer")
    save_checkpoint(
        path,
        "pformer",
        fingerprint,
        state={"model": model.state_dict()},
        counters={"epochs": epochs or cfg.pformer.epochs},
        extra={"loss_history": history},
    )
    return path


def _train_pdiffusion_stage(cfg, out_dir, seed, fingerprint, steps, log):
    arrays, p_p, estimator, ck_d = _restored_prompt_tokens(out_dir, cfg, seed, log)
    ck_f = _load_stage(out_dir, "pformer", "pdiffusion")
    coarse_model = _build_pformer(cfg)
    coarse_model.load_state_dict(ck_f["state"]["model"])
    coarse = batched_pformer(coarse_model, arrays["lq"], p_p.mean(axis=1))

    conf_head = ConfidenceHead(estimator.feature_channels)
    conf_head.load_state_dict(ck_d["state"]["confidence"])
    hw = arrays["lq"].shape[1:3]
    confidence = batched_confidence(conf_head, arrays["p_d"], hw)
    masks = canny_masks(arrays["lq"], cfg.edges.low, cfg.edges.high)

    data = {
        "x0": torch.from_numpy(np.ascontiguousarray(arrays["hq"].transpose(0, 3, 1, 2))),
        "i_cond": torch.from_numpy(np.ascontiguousarray(coarse.transpose(0, 3, 1, 2))),
        "tokens": torch.from_numpy(p_p),
        "edge_mask": torch.from_numpy(masks),
        "confidence": torch.from_numpy(confidence),
    }
    if cfg.pdiffusion.condition_on_raw:
        data["i_raw"] = torch.from_numpy(np.ascontiguousarray(arrays["lq"].transpose(0, 3, 1, 2)))
    denoiser = _build_denoiser(cfg)
    embedder = EdgeEmbedder(cfg.edges.channels)
    sched = make_schedule(cfg.pdiffusion.steps, cfg.pdiffusion.kappa, cfg.pdiffusion.eta1)
    result = train_pdiffusion(
        data,
        denoiser,
        edge_embedder=embedder,
        total_steps=steps or cfg.pdiffusion.total_steps,
        batch_size=cfg.pdiffusion.batch_size,
        lr=cfg.pdiffusion.lr,
        warmup_frac=cfg.pdiffusion.warmup_frac,
        sched=sched,
        seed=seed,
        log=log,
    )
    path = _ckpt_path(out_dir, "pdiffusion")
    save_checkpoint(
        path,
        "pdiffusion",
        fingerprint,
        state={"model": denoiser.state_dict(), "edge_embedder": embedder.state_dict()},
        counters={"step": result["step"]},
        extra={"loss_history": result["history"]},
    )
    return path


def run_train(
    component: str,
    cfg: PipelineConfig,
    out_dir,
    seed: int | None = None,
    epochs: int | None = None,
    steps: int | None = None,
    log=None,
) -> str:
    """Train one pipeline component inside a simulate-initialized run directory."""
    if component not in TRAIN_COMPONENTS:
        raise ValidationError(f"unknown component {component!r}; expected one of {TRAIN_COMPONENTS}")
    _apply_threads(cfg)
    seed = cfg.run.seed if seed is None else seed
    fingerprint = config_fingerprint(cfg)
    _require_manifest(out_dir)
    if component == "defocus":
        return _train_defocus_stage(cfg, out_dir, seed, fingerprint, epochs, log)
    if component == "prompt":
        return _train_prompt_stage(cfg, out_dir, seed, fingerprint, epochs, log)
    if component == "pformer":
        return _train_pformer_stage(cfg, out_dir, seed, fingerprint, epochs, log)
    return _train_pdiffusion_stage(cfg, out_dir, seed, fingerprint, steps, log)


## inference ------------------------------------------------------------------------------


class RestorationBundle:
    """All trained components needed to restore an image."""

    def __init__(self, cfg: PipelineConfig, checkpoint_dir, stage: str = "both"):
        self.cfg = cfg
        self.sched = make_schedule(cfg.pdiffusion.steps, cfg.pdiffusion.kappa, cfg.pdiffusion.eta1)
        ck_d = _load_stage(checkpoint_dir, "defocus", f"restore:{stage}")
        self.estimator = _build_estimator(cfg)
        self.estimator.load_state_dict(ck_d["state"]["model"])
        self.estimator.eval()
        self.confidence = ConfidenceHead(self.estimator.feature_channels)
        self.confidence.load_state_dict(ck_d["state"]["confidence"])
        self.encoder = _build_encoder(cfg)
        self.encoder.load_state_dict(
            _load_stage(checkpoint_dir, "encoder", f"restore:{stage}")["state"]["model"]
        )
        self.encoder.freeze()
        self.restorer = _build_restorer(cfg)
        self.restorer.load_state_dict(
            _load_stage(checkpoint_dir, "prompt", f"restore:{stage}")["state"]["model"]
        )
        self.restorer.eval()
        self.coarse = None
        self.denoiser = None
        self.edge_embedder = None
        if stage in ("coarse", "both"):
            self.coarse = _build_pformer(cfg)
            self.coarse.load_state_dict(
                _load_stage(checkpoint_dir, "pformer", f"restore:{stage}")["state"]["model"]
            )
            self.coarse.eval()
        if stage in ("fine", "both"):
            ck = _load_stage(checkpoint_dir, "pdiffusion", f"restore:{stage}")
            self.denoiser = _build_denoiser(cfg)
            self.denoiser.load_state_dict(ck["state"]["model"])
            self.denoiser.eval()
            self.edge_embedder = EdgeEmbedder(cfg.edges.channels)
            self.edge_embedder.load_state_dict(ck["state"]["edge_embedder"])

    def prompts_for(self, patch: ImagePatch):
        _, p_d = self.estimator.estimate(patch)
        p_lp = self.encoder.encode(patch)
        p_p = self.restorer.restore(p_lp, p_d)
        return p_d, p_lp, p_p

    def edge_prompt_for(self, patch: ImagePatch, p_d):
        mask = canny(patch, self.cfg.edges.low, self.cfg.edges.high)
        feats = edges.edge_embed(mask, self.edge_embedder)
        conf = edges.defocus_confidence(p_d, self.confidence, (patch.height, patch.width))
        return edges.weighted_edge_prompt(feats, conf), mask, conf

    def restore_patch(
        self, patch: ImagePatch, stage: str, seed: int, fine_input: ImagePatch | None = None,
        debug_callback=None,
    ) -> dict:
        p_d, _, p_p = self.prompts_for(patch)
        out = {}
        coarse = None
        if stage in ("coarse", "both"):
            coarse = self.coarse.restore(patch, p_p.pooled)
            out["coarse"] = coarse
        if stage in ("fine", "both"):
            cond = coarse if coarse is not None else fine_input
            if cond is None:
                raise ValidationError(
                    "stage=fine needs a coarse image: run stage=both or pass --fine-input"
                )
            p_e, mask, conf = self.edge_prompt_for(patch, p_d)
            out["fine"] = sample(
                cond, patch, p_p, p_e, self.sched, self.denoiser, seed=seed,
                debug_callback=debug_callback,
            )
            out["edges"] = mask
            out["confidence"] = conf
        return out


def _effective_tile(cfg: PipelineConfig, image: ImagePatch) -> tuple[int, int]:
    short = min(image.height, image.width)
    tile = min(cfg.data.tile_size, (short // 32) * 32)
    if tile < 32:
        raise ValidationError(f"image {image.height}x{image.width} too small to restore (need >= 32px)")
    stride = cfg.data.tile_stride if tile == cfg.data.tile_size else max(1, tile - 32)
    return tile, min(stride, tile)


def run_restore(
    cfg: PipelineConfig,
    out_dir,
    input_path,
    stage: str = "both",
    seed: int | None = None,
    fine_input=None,
    debug_steps: bool = False,
    checkpoint_dir=None,
    log=None,
) -> list[str]:
    """Tile, prompt, restore, and stitch one image (or every record of a manifest)."""
    if stage not in ("coarse", "fine", "both"):
        raise ValidationError(f"unknown stage {stage!r}")
    _apply_threads(cfg)
    seed = cfg.run.seed if seed is None else seed
    checkpoint_dir = checkpoint_dir or out_dir
    if stage == "fine" and fine_input is None:
        raise ValidationError("stage=fine needs --fine-input (or use stage=both)")
    bundle = RestorationBundle(cfg, checkpoint_dir, stage)
    rest_dir = os.path.join(out_dir, "restored")
    os.makedirs(rest_dir, exist_ok=True)

    inputs = [(None, os.fspath(input_path))]
    if os.fspath(input_path).endswith((".txt", ".manifest")):
        entries = metrics._load_eval_manifest(input_path)
        inputs = [(eid, entry["path"]) for eid, entry in sorted(entries.items())]

    written = []
    for eid, path in inputs:
        image = load_image(path, id=eid)
        fine_img = load_image(fine_input) if fine_input else None
        tile, stride = _effective_tile(cfg, image)
        tiles = tile_image(image, tile, stride)
        outs: dict[str, list] = {"coarse": [], "fine": []}
        for idx, patch in tiles:
            tile_seed = int(np.random.default_rng([seed, idx.row0, idx.col0]).integers(0, 2**31))
            cb = None
            if debug_steps and stage in ("fine", "both"):
                def cb(step, arr, _idx=idx):
                    dbg = ImagePatch(np.clip(arr, 0, 1), id="dbg")
                    save_image(dbg, os.path.join(rest_dir, f"{image.id}_r{_idx.row0}_c{_idx.col0}_step{step}.png"))
            fine_tile = None
            if fine_img is not None:
                fine_tile = ImagePatch(
                    fine_img.pixels[idx.row0 : idx.row0 + tile, idx.col0 : idx.col0 + tile],
                    id=f"{image.id}_fine_in",
                )
            result = bundle.restore_patch(patch, stage, tile_seed, fine_tile, cb)
            for key in ("coarse", "fine"):
                if key in result:
                    outs[key].append((idx, result[key]))
        for key, tiles_out in outs.items():
            if not tiles_out:
                continue
            stitched = stitch_tiles(tiles_out, image.height, image.width)
            out_path = os.path.join(rest_dir, f"{image.id}_{key}.png")
            save_image(stitched, out_path)
            written.append(out_path)
            if log is not None:
                log(f"wrote {out_path}")
    return written


## evaluation and diagnostics -------------------------------------------------------------


def _load_eval_encoder(cfg: PipelineConfig, checkpoint_dir) -> TinyViT:
    encoder = _build_encoder(cfg)
    path = _ckpt_path(checkpoint_dir, "encoder")
    if os.path.exists(path):
        encoder.load_state_dict(load_checkpoint(path, component="encoder")["state"]["model"])
    return encoder.freeze()


def run_evaluate(cfg: PipelineConfig, out_dir, pred_manifest, ref_manifest, checkpoint_dir=None) -> str:
    encoder = _load_eval_encoder(cfg, checkpoint_dir or out_dir)
    report_path = os.path.join(out_dir, "metrics.txt")
    metrics.evaluate_dataset(pred_manifest, ref_manifest, encoder, out_path=report_path)
    return report_path


def _heat_panel(heat: np.ndarray, scale: float) -> np.ndarray:
    u8 = np.clip(heat / max(scale, 1e-9) * 255.0, 0, 255).astype(np.uint8)
    return cv2.applyColorMap(u8, cv2.COLORMAP_INFERNO)


def run_diagnostics(cfg: PipelineConfig, out_dir, checkpoint_dir=None, n_samples: int = 64) -> str:
    """Prompt-distance report, per-plane defocus heatmap grid, router utilization."""
    checkpoint_dir = checkpoint_dir or out_dir
    _apply_threads(cfg)
    seed = cfg.run.seed
    bundle = RestorationBundle(cfg, checkpoint_dir, stage="coarse")

    arrays = _prompt_arrays(out_dir, cfg, seed, bundle.estimator, bundle.encoder)
    n = min(n_samples, len(arrays["p_lp"]))
    p_p = batched_restore_prompts(bundle.restorer, arrays["p_lp"][:n], arrays["p_d"][:n])
    rows = []
    for i in range(n):
        rep = prompt_restoration.prompt_distance_report(
            arrays["p_lp"][i], p_p[i], arrays["p_hp"][i]
        )
        rows.append((rep["mse_lp"], rep["mse_p"]))
    frac_improved = float(np.mean([p < lp for lp, p in rows]))

    # heatmap grid over the first stack, one panel per plane
    stacks = load_manifest(_require_manifest(out_dir))
    stack = stacks[0]
    head = bundle.estimator.distance_head()
    heats = []
    for offset, plane in stack.planes:
        crop = (plane.height // 32) * 32
        patch = ImagePatch(plane.pixels[:crop, :crop], id=plane.id)
        from .defocus import defocus_heatmap

        _, p_d = bundle.estimator.estimate(patch)
        heats.append(defocus_heatmap(p_d, head))
    scale = max(h.max() for h in heats)
    grid = np.concatenate([_heat_panel(h, scale) for h in heats], axis=1)
    grid_path = os.path.join(out_dir, "diagnostics_heatmap_grid.png")
    cv2.imwrite(grid_path, grid)

    # router utilization over one batch
    lq = arrays["lq"][: min(16, len(arrays["lq"]))]
    pooled = p_p[: len(lq)].mean(axis=1)
    batched_pformer(bundle.coarse, lq, pooled)
    utilization = bundle.coarse.router_utilization()

    report_path = os.path.join(out_dir, "diagnostics.txt")
    with open(report_path, "w") as fh:
        fh.write("sample  mse_lp  mse_p\n")
        for i, (lp, p) in enumerate(rows):
            fh.write(f"{i}  {lp:.6f}  {p:.6f}\n")
        fh.write(f"fraction_improved={frac_improved:.4f}\n")
        fh.write(f"heatmap_grid={os.path.basename(grid_path)} panels={len(heats)}\n")
        for block, weights in sorted(utilization.items()):
            fh.write(
                f"router {block} weights=" + ",".join(f"{w:.4f}" for w in weights)
                + f" sum={float(np.sum(weights)):.6f}\n"
            )
    return report_path
