"""Nonnegative feature maps and the four gating parameterizations.

The feature map is the symmetric-exponential kind: act(xW) concatenated with
act(-xW), where act is elementwise exp or a row softmax over the feature
columns. Nonnegativity of the output is what makes the gate-absorbed
chunkwise kernel stable, so it is asserted by tests rather than assumed.

Gate variants and their learnable parameters:

    scalar    gamma_i = sigmoid(x_i W_g),                 W_g: [d_in, 1]
    mamba2    gamma_i = exp(-softplus(x_i W_g) * exp(a)), W_g: [d_in, 1], a scalar
    low_rank  Gamma_i = sigmoid(x_i W_g1 W_g2),           W_g1: [d_in, 16], W_g2: [16, d_gate]
    pooling   gamma_i = sigmoid(mean(k_i)),               no parameters

Scalar variants emit one gate per position, broadcast across the gated
feature axis; low_rank emits a full per-dimension gate vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, DomainError
from .numcore import Tensor

GATE_VARIANTS = ("scalar", "mamba2", "low_rank", "pooling")

# Gates are clamped away from exact zero so cumulative log-gates stay finite;
# within-chunk exponent growth is then bounded by the chunk planner.
GATE_FLOOR = 1e-6
LOW_RANK_INNER = 16


@dataclass
class FeatureMap:
    """Projection plus symmetric-exponential activation; output width 2f."""

    weight: Tensor  # [d, f]
    activation: str = "softmax"  # "softmax" | "exp"

    def __post_init__(self):
        if self.activation not in ("softmax", "exp"):
            raise ConfigError(f"unknown feature activation {self.activation!r}")

    @property
    def feature_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return 2 * self.weight.shape[1]


def init_feature_map(d, f, rng, activation="softmax", dtype=np.float32):
    w = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, f)).astype(dtype)
    return FeatureMap(Tensor(w, requires_grad=True), activation)


def feature_log_halves(fmap: FeatureMap, x: Tensor):
    """log of the two feature halves, before exponentiation.

    For exp activation these are (xW, -xW); for softmax, each half is shifted
    by its row log-sum-exp so that exp() of the result is the row softmax.
    """
    s = nc.matmul(x, fmap.weight)
    neg = nc.neg(s)
    if fmap.activation == "exp":
        return s, neg
    return nc.sub(s, nc.logsumexp_last(s)), nc.sub(neg, nc.logsumexp_last(neg))


def feature_apply(fmap: FeatureMap, x: Tensor) -> Tensor:
    """Map x[..., d] to strictly positive features [..., 2f]."""
    lp, ln = feature_log_halves(fmap, x)
    return nc.concat_last(nc.exp(lp), nc.exp(ln))


@dataclass
class GateSpec:
    variant: str
    params: dict = field(default_factory=dict)  # name -> Tensor

    def __post_init__(self):
        if self.variant not in GATE_VARIANTS:
            raise ConfigError(f"unknown gate variant {self.variant!r}")

    def param_count(self):
        return sum(t.size for t in self.params.values())

    def trainable(self):
        return list(self.params.values())


def init_gate(variant, d_in, d_gate, rng, dtype=np.float32):
    """Fresh gate parameters. Weights start near zero so gates start near 0.5
    (mamba2's extra scale a starts at 0, same effect through softplus(0))."""
    if variant == "scalar":
        w = rng.normal(0.0, 0.02, size=(d_in, 1)).astype(dtype)
        return GateSpec(variant, {"w": Tensor(w, requires_grad=True)})
    if variant == "mamba2":
        w = rng.normal(0.0, 0.02, size=(d_in, 1)).astype(dtype)
        a = np.zeros((1, 1), dtype=dtype)
        return GateSpec(variant, {"w": Tensor(w, requires_grad=True), "a": Tensor(a, requires_grad=True)})
    if variant == "low_rank":
        w1 = rng.normal(0.0, 0.02, size=(d_in, LOW_RANK_INNER)).astype(dtype)
        w2 = rng.normal(0.0, 0.02, size=(LOW_RANK_INNER, d_gate)).astype(dtype)
        return GateSpec(variant, {"w1": Tensor(w1, requires_grad=True), "w2": Tensor(w2, requires_grad=True)})
    return GateSpec("pooling", {})


@dataclass
class GateValues:
    """Per-position gate activations and their cumulative log over time.

    gamma: [..., L, 1] for per-position-scalar variants, [..., L, d_gate] for
    per-dimension variants; always in (0, 1]. log_c[t] = sum_{j<=t} log gamma[j].
    """

    gamma: Tensor
    log_c: Tensor

    @property
    def width(self):
        return self.gamma.shape[-1]


def cumulative_log_gates(gamma: Tensor) -> Tensor:
    """Running sum of log gates along time; non-increasing by construction."""
    if (gamma.data <= 0.0).any():
        raise DomainError("gate values must be strictly positive")
    return nc.cumsum_time(nc.log(gamma))


def gate_values(spec: GateSpec, x: Tensor = None, k: Tensor = None) -> GateValues:
    """Evaluate a gate variant on layer inputs x (learnable kinds) or keys k
    (pooling). Gates are clamped to [GATE_FLOOR, 1]."""
    if spec.variant == "scalar":
        if x is None:
            raise ContractError("scalar gate requires x")
        gamma = nc.sigmoid(nc.matmul(x, spec.params["w"]))
    elif spec.variant == "mamba2":
        if x is None:
            raise ContractError("mamba2 gate requires x")
        rate = nc.exp(spec.params["a"])
        gamma = nc.exp(nc.neg(nc.mul(nc.softplus(nc.matmul(x, spec.params["w"])), rate)))
    elif spec.variant == "low_rank":
        if x is None:
            raise ContractError("low_rank gate requires x")
        gamma = nc.sigmoid(nc.matmul(nc.matmul(x, spec.params["w1"]), spec.params["w2"]))
    else:  # pooling
        if k is None:
            raise ContractError("pooling gate requires k")
        gamma = nc.sigmoid(nc.mean_last(k, keepdims=True))
    gamma = nc.clip(gamma, GATE_FLOOR, 1.0)
    return GateValues(gamma=gamma, log_c=cumulative_log_gates(gamma))


def unit_gates(lead_shape, L, dtype=np.float32):
    """Gates pinned at 1 (no decay): the ungated / gate-ablated configuration."""
    shape = tuple(lead_shape) + (L, 1)
    one = Tensor(np.ones(shape, dtype=dtype))
    return GateValues(gamma=one, log_c=Tensor(np.zeros(shape, dtype=dtype)))
