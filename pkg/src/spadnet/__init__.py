"""Spacing-adaptive 3D networks on a minimal numpy autodiff core.

Anisotropy-aware convolution adaptation, a soft-token visual tokenizer with
dual prior-distribution regularization, masked token modeling, additive 3D
rotary position embeddings, and the data/metrics plumbing to verify them.
"""

from .geometry import Spacing, VolumeGrid, degree_of_anisotropy, propagate_spacing
from .spadconv import (
    BaseConvSpec,
    ConvAdaptation,
    NetworkPlan,
    adapt_conv,
    adapt_generalized,
    plan_network,
    sum_pool_weights,
    unet4_stages,
)
from .tensor import Tensor, check_gradients, grad
from .tokenizer import (
    PdrConfig,
    SpadTokenizer,
    TokenDistributionGrid,
    TokenizerConfig,
    dual_pdr_loss,
    reconstruction_loss,
    soft_quantize,
    train_tokenizer_toy,
)
from .mim import MaskSpec, MimConfig, SpadVit, mim_loss, sample_mask, train_mim_toy
from .rope3d import RopeParams, rope_inner, rope_min_gap_analysis, rope_report, rope_rotate

__version__ = "0.1.0"

__all__ = [
    "BaseConvSpec",
    "ConvAdaptation",
    "MaskSpec",
    "MimConfig",
    "NetworkPlan",
    "PdrConfig",
    "RopeParams",
    "SpadTokenizer",
    "SpadVit",
    "Spacing",
    "Tensor",
    "TokenDistributionGrid",
    "TokenizerConfig",
    "VolumeGrid",
    "adapt_conv",
    "adapt_generalized",
    "check_gradients",
    "degree_of_anisotropy",
    "dual_pdr_loss",
    "grad",
    "mim_loss",
    "plan_network",
    "propagate_spacing",
    "reconstruction_loss",
    "rope_inner",
    "rope_min_gap_analysis",
    "rope_report",
    "rope_rotate",
    "sample_mask",
    "soft_quantize",
    "sum_pool_weights",
    "train_mim_toy",
    "train_tokenizer_toy",
    "unet4_stages",
    "__version__",
]
