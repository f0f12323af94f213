"""Gated linear attention, sliding-window attention with meta memory, and a
two-stage distillation pipeline for linearizing small softmax transformers."""

from . import errors
from .features import FeatureMap, GateSpec, GateValues, feature_apply, gate_values
from .gla import ChunkPlan, RecurrentState, gla_chunkwise, gla_parallel, gla_recurrent, gla_step
from .model import (
    ModelConfig,
    Transformer,
    build_student,
    greedy_generate,
    lm_loss,
    load_checkpoint,
    save_checkpoint,
    stage1_mse_loss,
)
from .numcore import Tensor, tensor
from .reference import RopeConfig, causal_softmax_attention, rope_transform
from .swa import SwaCache, SwaConfig, build_swa_mask, swa_cache_step, swa_forward

__version__ = "0.1.0"

__all__ = [
    "errors",
    "Tensor",
    "tensor",
    "FeatureMap",
    "GateSpec",
    "GateValues",
    "feature_apply",
    "gate_values",
    "ChunkPlan",
    "RecurrentState",
    "gla_recurrent",
    "gla_parallel",
    "gla_chunkwise",
    "gla_step",
    "SwaConfig",
    "SwaCache",
    "build_swa_mask",
    "swa_forward",
    "swa_cache_step",
    "RopeConfig",
    "rope_transform",
    "causal_softmax_attention",
    "ModelConfig",
    "Transformer",
    "build_student",
    "greedy_generate",
    "lm_loss",
    "stage1_mse_loss",
    "save_checkpoint",
    "load_checkpoint",
    "__version__",
]
