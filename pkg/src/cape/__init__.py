"""Compartmental-prototype epidemic forecasting.

A patch transformer over case-count series whose blocks express each patch
as a softmax mixture of learnable compartment prototypes. Self-supervised
pretraining (masked reconstruction + contrastive views) is combined with
epidemic-aware regularizers: monotonicity and smoothness of prototype
trajectories and a differentiable bracket on the basic reproduction number
built from a next-generation-matrix proxy.
"""

from .analysis import (cmd_score, dbi_pairwise, dbi_score, forecast_metrics,
                       naive_baselines, prototype_alignment_report, spearman,
                       window_embeddings)
from .autodiff import Tensor, backward, grad_check
from .config import RunConfig, load_config
from .data import (TimeSeriesRecord, load_csv, make_windows, mask_patches,
                   make_views, patchify, save_csv, unpatchify,
                   zscore_normalize)
from .linalg import R0Bounds, r0_bounds, singular_values, spectral_radius
from .losses import (LossWeights, align_loss, contrastive_loss, finetune_loss,
                     monotonic_loss, ngm_proxy, pretrain_loss, recon_loss,
                     smoothness_loss)
from .model import CapeModel, ForwardOutput, ModelConfig
from .sim import SirdParams, Trajectory, make_corpus, simulate_sird
from .training import (TrainConfig, TrainState, finetune, load_checkpoint,
                       pretrain, save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "CapeModel", "ForwardOutput", "LossWeights", "ModelConfig", "R0Bounds",
    "RunConfig", "SirdParams", "Tensor", "TimeSeriesRecord", "TrainConfig",
    "TrainState", "Trajectory", "align_loss", "backward", "cmd_score",
    "contrastive_loss", "dbi_pairwise", "dbi_score", "finetune",
    "finetune_loss", "forecast_metrics", "grad_check", "load_checkpoint",
    "load_config", "load_csv", "make_corpus", "make_views", "make_windows",
    "mask_patches", "monotonic_loss", "naive_baselines", "ngm_proxy",
    "patchify", "pretrain", "pretrain_loss", "prototype_alignment_report",
    "r0_bounds", "recon_loss", "save_checkpoint", "save_csv",
    "simulate_sird", "singular_values", "smoothness_loss", "spearman",
    "spectral_radius", "unpatchify", "window_embeddings", "zscore_normalize",
]
