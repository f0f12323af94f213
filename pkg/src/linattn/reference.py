"""Reference softmax attention with rotary position embeddings.

This is the distillation target and the correctness oracle for the windowed
path: written for clarity, it applies the rotary transform and a full causal
masked softmax with no tiling tricks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError
from .numcore import Tensor


@dataclass
class RopeConfig:
    head_dim: int
    theta_base: float = 10000.0
    max_position: int = 65536

    def __post_init__(self):
        if self.head_dim % 2 != 0:
            raise ConfigError(f"rotary head_dim must be even, got {self.head_dim}")
        if self.theta_base <= 1.0:
            raise ConfigError("rotary theta_base must exceed 1")


def rope_tables(positions, cfg: RopeConfig, dtype=np.float32):
    """cos/sin tables of shape [len(positions), head_dim].

    Channel pair (2j, 2j+1) rotates by angle p * theta_base**(-2j/d); both
    channels of a pair share the angle.
    """
    positions = np.asarray(positions, dtype=np.float64)
    d = cfg.head_dim
    inv_freq = cfg.theta_base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = np.repeat(positions[:, None] * inv_freq[None, :], 2, axis=1)
    return angles.astype(dtype), np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _pair_swap_matrix(d, dtype):
    """Constant matrix P with (x @ P)[2j] = -x[2j+1], (x @ P)[2j+1] = x[2j]."""
    p = np.zeros((d, d), dtype=dtype)
    for j in range(0, d, 2):
        p[j + 1, j] = -1.0
        p[j, j + 1] = 1.0
    return p


def rope_transform(x: Tensor, positions, cfg: RopeConfig) -> Tensor:
    """Rotate channel pairs of x[..., L, d] by position-dependent angles."""
    if x.shape[-1] != cfg.head_dim:
        raise ConfigError(f"input width {x.shape[-1]} != head_dim {cfg.head_dim}")
    if len(positions) != x.shape[-2]:
        raise ConfigError("positions must cover every row")
    _, cos, sin = rope_tables(positions, cfg, dtype=x.dtype)
    p = Tensor(_pair_swap_matrix(cfg.head_dim, x.dtype))
    return nc.add(nc.mul(x, Tensor(cos)), nc.mul(nc.matmul(x, p), Tensor(sin)))


def causal_mask(L, dtype=np.float32):
    """Additive 0 / -inf lower-triangular mask."""
    m = np.where(np.tri(L, dtype=bool), 0.0, -np.inf)
    return m.astype(dtype)


def causal_softmax_attention(q: Tensor, k: Tensor, v: Tensor, scale=None) -> Tensor:
    """softmax(q k^T * scale + causal mask) v over the trailing two axes."""
    L = q.shape[-2]
    if scale is None:
        scale = 1.0 / float(np.sqrt(q.shape[-1]))
    scores = nc.mul(nc.matmul(q, nc.transpose(k)), float(scale))
    weights = nc.masked_softmax_rows(scores, causal_mask(L, q.dtype))
    return nc.matmul(weights, v)


def teacher_forward_collect(model, tokens):
    """Run a frozen teacher and capture per-layer supervision records.

    Each record holds the layer input (post-norm hidden state), the pre-rotary
    Q/K, V, and the per-head attention output before the output projection.
    Delegates to the model's own collection hook so the captured values are
    exactly what the forward pass computed.
    """
    return model.forward_collect(tokens)
