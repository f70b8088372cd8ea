"""Part discovery and part-aware adaptive masking for MAE-style pretraining."""

from .mae_core import AdamW, MaeModel, PatchGrid, forward, mim_loss, patchify, train_step, unpatchify
from .mask_scheduler import (
    MaskPlan,
    ScheduleConfig,
    alpha,
    budget_whole_parts,
    compute_num_mask,
    sample_mask_indices,
)
from .numerics import Rng, Tensor, backward, no_grad
from .partlearn import (
    AttentionMaps,
    EncoderTokens,
    PartAttentionParams,
    PartSegmentation,
    attention_maps,
    blur_maps,
    diversity_loss,
    part_tokens,
    segment,
    select_foreground,
)
from .recon_decoder import DecoderParams, ImagePair, adain, decode, part_learning_loss, recon_loss

__all__ = [
    "AdamW", "MaeModel", "PatchGrid", "forward", "mim_loss", "patchify", "train_step", "unpatchify",
    "MaskPlan", "ScheduleConfig", "alpha", "budget_whole_parts", "compute_num_mask", "sample_mask_indices",
    "Rng", "Tensor", "backward", "no_grad",
    "AttentionMaps", "EncoderTokens", "PartAttentionParams", "PartSegmentation",
    "attention_maps", "blur_maps", "diversity_loss", "part_tokens", "segment", "select_foreground",
    "DecoderParams", "ImagePair", "adain", "decode", "part_learning_loss", "recon_loss",
]
__version__ = "0.1.0"
