"""Transformer cross-attention fused with a gated Gaussian-mixture branch, on a small numpy autograd engine."""

from .attention import AttentionRecord, GmaConfig, convert_params, dot_product_attention, gate_fuse, gaussian_mixture_weights
from .data import AlignedExample, TaskSpec, batchify, generate
from .model import ModelConfig, Transformer
from .tensor import Tensor, backward, finite_diff_check, no_grad, zero_grad
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AlignedExample",
    "AttentionRecord",
    "GmaConfig",
    "ModelConfig",
    "TaskSpec",
    "Tensor",
    "TrainConfig",
    "Transformer",
    "backward",
    "batchify",
    "convert_params",
    "dot_product_attention",
    "evaluate",
    "finite_diff_check",
    "gate_fuse",
    "gaussian_mixture_weights",
    "generate",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "train",
    "zero_grad",
]
