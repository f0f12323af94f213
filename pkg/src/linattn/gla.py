"""Gated linear attention in three equivalent forms plus single-step decode.

Shapes follow the convention [..., L, width]: the trailing axis is the
feature/value axis, the second-to-last is time, and any leading axes (batch,
heads) broadcast through untouched. Gate values come in as GateValues with
width 1 (per-position scalar, broadcast over the feature axis) or width 2f
(per-dimension gates).

The three algorithms compute the same function:

  recurrent   per-token state update S_t = G_t * S_{t-1} + phi_k(k_t) v_t^T,
              y_t = phi_q(q_t) S_t; O(1) memory in L, sequential.

  parallel    masked matrix form: ((phi_q .* C)(phi_k ./ C)^T .* M) V where
              C = exp(cumulative log gates). Fast at short L but the raw
              cumulative product underflows once min log C drops below the
              guard, so it refuses (PrecisionError) rather than degrade.

  chunkwise   the stable reparameterization: within each chunk the cumulative
              gates are re-anchored at the chunk boundary and absorbed into
              the exponentials of the feature map, turning the intra-chunk
              work into one masked matmul; a recurrent state carried across
              chunks (decayed by the boundary-to-boundary gate product)
              contributes the prefix. Exponents are bounded by the per-chunk
              log span, so no sequence length can overflow it.

Normalization (the denominator of the per-token definition) is implemented
identically in all three paths by appending a ones column to V and dividing
by the resulting extra output column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ContractError, PrecisionError, ShapeError
from .features import GateValues, feature_log_halves
from .numcore import Tensor

# exp(-60) ~ 9e-27 is still comfortably inside f32 subnormal range on the C
# side and exp(+60) ~ 1e26 leaves headroom before f32 overflow on the 1/C side.
PARALLEL_LOG_GUARD = -60.0


@dataclass
class RecurrentState:
    """Constant-memory summary of the gated past: S = sum of decayed
    phi_k v^T outer products, z the matching normalizer accumulator."""

    s: Tensor  # [..., F, d_v]
    z: Tensor  # [..., F, 1]
    step: int = 0

    def float_count(self):
        """Live floats including the step counter (the constancy metric)."""
        return int(self.s.size + self.z.size + 1)

    def copy(self):
        return RecurrentState(
            Tensor(self.s.data.copy()), Tensor(self.z.data.copy()), self.step
        )


def fresh_state(lead_shape, feat_dim, d_v, dtype=np.float32):
    lead = tuple(lead_shape)
    return RecurrentState(
        s=nc.zeros(lead + (feat_dim, d_v), dtype=dtype),
        z=nc.zeros(lead + (feat_dim, 1), dtype=dtype),
        step=0,
    )


@dataclass
class ChunkPlan:
    """Chunk layout for the chunkwise kernel.

    chunk_size is the nominal block length; log_span_cap additionally splits
    a block early whenever the cumulative log-gate drop inside it would
    exceed the cap, keeping every absorbed exponent bounded regardless of how
    aggressive the gates are. The cap must exceed the largest single-step
    drop, |log(gate floor)| ~ 13.8.
    """

    chunk_size: int = 64
    log_span_cap: float = 30.0

    def boundaries(self, log_c_data):
        """List of (start, stop) chunk extents for a [..., L, G] log-gate array."""
        L = log_c_data.shape[-2]
        if self.chunk_size < 1:
            raise ContractError("chunk_size must be >= 1")
        # worst (most negative) cumulative gate per position across lead/gate dims
        worst = log_c_data.reshape(-1, L, log_c_data.shape[-1]).min(axis=(0, 2))
        bounds = []
        start = 0
        anchor = 0.0
        for t in range(1, L):
            if t - start >= self.chunk_size or anchor - worst[t] > self.log_span_cap:
                bounds.append((start, t))
                start = t
                anchor = worst[t - 1]
        bounds.append((start, L))
        return bounds


def _augment_values(v, normalize):
    if not normalize:
        return v
    ones = Tensor(np.ones(v.shape[:-1] + (1,), dtype=v.dtype))
    return nc.concat_last(v, ones)


def _split_normalize(y_aug, d_v, normalize):
    if not normalize:
        return y_aug
    num = nc.slice_axis(y_aug, -1, 0, d_v)
    den = nc.slice_axis(y_aug, -1, d_v, d_v + 1)
    if (den.data <= 0.0).any():
        raise ContractError("degenerate normalizer: nonpositive denominator")
    return nc.div(num, den)


def _gate_rows(gamma_t):
    """Reshape a [..., 1, G] gate slice to [..., G, 1] for row-wise state scaling."""
    return nc.transpose(gamma_t)


def gla_step(state: RecurrentState, phi_q_t, phi_k_t, v_t, gamma_t, normalize=True):
    """One decode step: returns (y_t, new_state). Inputs are single-token
    slices shaped [..., 1, width]; state size is unchanged by the step."""
    g = _gate_rows(gamma_t)
    s = nc.add(nc.mul(g, state.s), nc.matmul(nc.transpose(phi_k_t), v_t))
    z = nc.add(nc.mul(g, state.z), nc.transpose(phi_k_t))
    num = nc.matmul(phi_q_t, s)
    if normalize:
        den = nc.matmul(phi_q_t, z)
        if (den.data <= 0.0).any():
            raise ContractError("degenerate normalizer: nonpositive denominator")
        y = nc.div(num, den)
    else:
        y = num
    return y, RecurrentState(s=s, z=z, step=state.step + 1)


def gla_recurrent(phi_q, phi_k, v, gates: GateValues, normalize=True, state=None):
    """Per-token recurrence over the full sequence; returns (y, final_state)."""
    L = phi_q.shape[-2]
    if gates.gamma.shape[-2] != L:
        raise ShapeError("gate values must cover every position")
    if state is None:
        state = fresh_state(phi_q.shape[:-2], phi_k.shape[-1], v.shape[-1], v.dtype)
    ys = []
    for t in range(L):
        y_t, state = gla_step(
            state,
            nc.slice_axis(phi_q, -2, t, t + 1),
            nc.slice_axis(phi_k, -2, t, t + 1),
            nc.slice_axis(v, -2, t, t + 1),
            nc.slice_axis(gates.gamma, -2, t, t + 1),
            normalize=normalize,
        )
        ys.append(y_t)
    return nc.concat(ys, axis=-2), state


def _causal_ones(L, dtype):
    return Tensor(np.tri(L, dtype=dtype))


def gla_parallel(phi_q, phi_k, v, gates: GateValues, normalize=True):
    """Masked matrix form. Valid only while exp(log C) stays in range; a
    guard trips with PrecisionError directing the caller to the chunkwise
    path instead of silently underflowing."""
    L = phi_q.shape[-2]
    worst = float(gates.log_c.data.min()) if gates.log_c.size else 0.0
    if worst <= PARALLEL_LOG_GUARD:
        raise PrecisionError(
            f"cumulative log-gates reach {worst:.1f} <= {PARALLEL_LOG_GUARD}; "
            "use the chunkwise algorithm"
        )
    c = nc.exp(gates.log_c)
    qc = nc.mul(phi_q, c)
    kc = nc.div(phi_k, c)
    weights = nc.mul(nc.matmul(qc, nc.transpose(kc)), _causal_ones(L, phi_q.dtype))
    y_aug = nc.matmul(weights, _augment_values(v, normalize))
    return _split_normalize(y_aug, v.shape[-1], normalize)


def _split_gate_halves(delta, f):
    """Per-half gate offsets: width-1 gates broadcast to both halves."""
    if delta.shape[-1] == 1:
        return delta, delta
    if delta.shape[-1] != 2 * f:
        raise ShapeError(
            f"gate width {delta.shape[-1]} must be 1 or 2*feature_dim ({2 * f})"
        )
    return nc.slice_axis(delta, -1, 0, f), nc.slice_axis(delta, -1, f, 2 * f)


def gla_chunkwise(
    q,
    k,
    v,
    log_c,
    maps,
    plan: ChunkPlan = None,
    normalize=True,
    return_state=False,
):
    """Hardware-oriented chunked form operating on raw q/k plus the feature
    maps: the per-chunk gate offsets are added inside the feature-map
    exponentials (queries get +offset, keys -offset), so each chunk reduces
    to one masked matmul plus a carried state update.
    """
    if plan is None:
        plan = ChunkPlan()
    fmap_q, fmap_k = maps
    f = fmap_q.feature_dim
    lqp, lqn = feature_log_halves(fmap_q, q)
    lkp, lkn = feature_log_halves(fmap_k, k)
    d_v = v.shape[-1]
    v_aug = _augment_values(v, normalize)
    state_mat = nc.zeros(
        q.shape[:-2] + (2 * f, v_aug.shape[-1]), dtype=v.dtype
    )
    anchor = None  # log C at the position before the current chunk
    outs = []
    for start, stop in plan.boundaries(log_c.data):
        lc = nc.slice_axis(log_c, -2, start, stop)
        delta = lc if anchor is None else nc.sub(lc, anchor)
        d_pos, d_neg = _split_gate_halves(delta, f)
        q_tilde = nc.concat_last(
            nc.exp(nc.add(nc.slice_axis(lqp, -2, start, stop), d_pos)),
            nc.exp(nc.add(nc.slice_axis(lqn, -2, start, stop), d_neg)),
        )
        k_tilde = nc.concat_last(
            nc.exp(nc.sub(nc.slice_axis(lkp, -2, start, stop), d_pos)),
            nc.exp(nc.sub(nc.slice_axis(lkn, -2, start, stop), d_neg)),
        )
        weights = nc.mul(
            nc.matmul(q_tilde, nc.transpose(k_tilde)),
            _causal_ones(stop - start, q.dtype),
        )
        vc = nc.slice_axis(v_aug, -2, start, stop)
        y_c = nc.add(nc.matmul(weights, vc), nc.matmul(q_tilde, state_mat))
        outs.append(y_c)
        new_anchor = nc.slice_axis(log_c, -2, stop - 1, stop)
        d_last = new_anchor if anchor is None else nc.sub(new_anchor, anchor)
        decay = _gate_rows(nc.exp(d_last))  # [..., G, 1] scales state rows
        state_mat = nc.mul(decay, nc.add(state_mat, nc.matmul(nc.transpose(k_tilde), vc)))
        anchor = new_anchor
    y = _split_normalize(nc.concat(outs, axis=-2), d_v, normalize)
    if not return_state:
        return y
    if normalize:
        s = nc.slice_axis(state_mat, -1, 0, d_v)
        z = nc.slice_axis(state_mat, -1, d_v, d_v + 1)
    else:
        s = state_mat
        z = nc.zeros(state_mat.shape[:-1] + (1,), dtype=v.dtype)
    return y, RecurrentState(s=s, z=z, step=q.shape[-2])
