"""Prompt-guided two-stage restoration of defocused microscopy images.

The pipeline estimates per-patch defocus, restores a pathology token prompt,
extracts confidence-weighted edges, runs a mixture-of-experts transformer for
coarse restoration, and refines with a short residual-diffusion chain.
"""

from .degrade import DefocusLabel, OpticsParams, ctf_value, defocus_blur, gaussian_psf, stain_augment, synth_focal_stack
from .defocus import DefocusEstimate, DefocusEstimator, DefocusPrompt, defocus_heatmap, defocus_loss
from .edges import EdgeMap, EdgePrompt, canny, weighted_edge_prompt
from .encoders import EncoderSpec, PathologyPrompt, TinyViT, encode, get_encoder, list_encoders
from .imgio import FocalStack, ImagePatch, TileIndex, load_image, load_manifest, save_image, stitch_tiles, tile_image
from .metrics import MetricReport, evaluate_dataset, perceptual_proxy, psnr, ssim
from .pdiffusion import ConditionalDenoiser, DiffusionSchedule, forward_marginal, make_schedule, posterior_step, sample
from .pformer import PFormer, PFormerConfig, moe_mix, router_weights
from .prompt_restoration import PromptRestorer, PromptRestorerConfig, prompt_distance_report, prompt_loss, restore_prompt

__version__ = "0.1.0"
