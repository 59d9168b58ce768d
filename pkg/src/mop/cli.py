"""`mop` command-line pipeline: simulate, train, restore, evaluate, diagnose,
plus the edge and defocus-heatmap inspection commands.

Exit codes: 0 success, 2 validation/usage error, 3 missing upstream dependency.
"""

from __future__ import annotations

import argparse
import sys
import time

import cv2
import numpy as np

from . import pipeline
from .config import PipelineConfig, load_config
from .defocus import defocus_heatmap
from .errors import DependencyError, ValidationError
from .imgio import ImagePatch, load_image, save_image


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, default=None, help="override run.seed")
    parser.add_argument("--out", required=True, help="output / run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic focal stacks + manifest")
    _add_common(p)

    p = sub.add_parser("train", help="train one pipeline component")
    p.add_argument("component", choices=pipeline.TRAIN_COMPONENTS)
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None, help="override the configured epochs")
    p.add_argument("--steps", type=int, default=None, help="override pdiffusion total steps")

    p = sub.add_parser("restore", help="restore an image (or manifest of images)")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--stage", choices=("coarse", "fine", "both"), default="both")
    p.add_argument("--fine-input", default=None, help="coarse image to refine when stage=fine")
    p.add_argument("--debug-steps", action="store_true", help="write per-step sampler PNGs")
    p.add_argument("--checkpoints", default=None, help="directory holding checkpoints/ (default: --out)")

    p = sub.add_parser("evaluate", help="score prediction vs reference manifests")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--checkpoints", default=None)

    p = sub.add_parser("diagnose", help="prompt distances, heatmap grid, router utilization")
    _add_common(p)
    p.add_argument("--checkpoints", default=None)

    p = sub.add_parser("edges", help="write binary edge and confidence-style PNGs")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--low", type=float, default=None)
    p.add_argument("--high", type=float, default=None)
    p.add_argument("--checkpoints", default=None, help="use a trained confidence head if present")

    p = sub.add_parser("defocus-heatmap", help="colormapped heatmap beside the input image")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoints", default=None)

    return parser


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    return cfg


def _cmd_edges(cfg, args) -> None:
    import os

    from .edges import canny

    image = load_image(args.input)
    low = cfg.edges.low if args.low is None else args.low
    high = cfg.edges.high if args.high is None else args.high
    edge_map = canny(image, low, high)
    os.makedirs(args.out, exist_ok=True)
    cv2.imwrite(os.path.join(args.out, f"{image.id}_edges.png"), edge_map.mask * 255)

    ckpt_dir = args.checkpoints or args.out
    conf_path = pipeline._ckpt_path(ckpt_dir, "defocus")
    if os.path.exists(conf_path):
        from .checkpoint import load_checkpoint
        from .edges import ConfidenceHead

        ck = load_checkpoint(conf_path, component="defocus")
        estimator = pipeline._build_estimator(cfg)
        estimator.load_state_dict(ck["state"]["model"])
        head = ConfidenceHead(estimator.feature_channels)
        head.load_state_dict(ck["state"]["confidence"])
        crop = (min(image.height, image.width) // 32) * 32
        patch = ImagePatch(image.pixels[:crop, :crop], id=image.id)
        _, p_d = estimator.estimate(patch)
        from .edges import defocus_confidence

        conf = defocus_confidence(p_d, head, (crop, crop))[0]
        heat = cv2.applyColorMap((conf * 255).astype(np.uint8), cv2.COLORMAP_INFERNO)
        cv2.imwrite(os.path.join(args.out, f"{image.id}_confidence.png"), heat)


def _cmd_heatmap(cfg, args) -> None:
    import os

    ckpt_dir = args.checkpoints or args.out
    ck = pipeline._load_stage(ckpt_dir, "defocus", "defocus-heatmap")
    estimator = pipeline._build_estimator(cfg)
    estimator.load_state_dict(ck["state"]["model"])
    image = load_image(args.input)
    crop_h = (image.height // 32) * 32
    crop_w = (image.width // 32) * 32
    patch = ImagePatch(image.pixels[:crop_h, :crop_w], id=image.id)
    _, p_d = estimator.estimate(patch)
    heat = defocus_heatmap(p_d, estimator.distance_head())
    u8 = np.clip(heat / max(heat.max(), 1e-9) * 255, 0, 255).astype(np.uint8)
    panel = cv2.applyColorMap(u8, cv2.COLORMAP_INFERNO)
    rgb = (patch.pixels[:, :, ::-1] * 255).astype(np.uint8)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, f"{image.id}_heatmap.png")
    cv2.imwrite(out_path, np.concatenate([rgb, panel], axis=1))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = _load_cfg(args)
        seed = cfg.run.seed
        with pipeline.output_lock(args.out):
            if args.command == "simulate":
                pipeline.run_simulate(cfg, args.out, seed)
            elif args.command == "train":
                pipeline.run_train(
                    args.component, cfg, args.out, seed,
                    epochs=args.epochs, steps=args.steps, log=print,
                )
            elif args.command == "restore":
                pipeline.run_restore(
                    cfg, args.out, args.input, stage=args.stage, seed=seed,
                    fine_input=args.fine_input, debug_steps=args.debug_steps,
                    checkpoint_dir=args.checkpoints, log=print,
                )
            elif args.command == "evaluate":
                path = pipeline.run_evaluate(cfg, args.out, args.pred, args.ref, args.checkpoints)
                print(open(path).read(), end="")
            elif args.command == "diagnose":
                path = pipeline.run_diagnostics(cfg, args.out, args.checkpoints)
                print(f"wrote {path}")
            elif args.command == "edges":
                _cmd_edges(cfg, args)
            elif args.command == "defocus-heatmap":
                _cmd_heatmap(cfg, args)
            pipeline.write_run_record(args.out, args.command, cfg, seed, started)
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
