"""Sliding-window softmax attention with pinned meta tokens.

Each query attends to the w most recent positions (inclusive) plus the first
m positions of the stream, which act as pinned global slots. Two forms:

  batch      a banded evaluation over gathered key/value slabs, O(L (w+m) d)
             work rather than a full L x L matrix;
  streaming  a fixed-capacity cache (m pinned slots + a w-slot ring) whose
             per-step output equals the matching row of the batch form.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError
from .numcore import Tensor


@dataclass
class SwaConfig:
    window: int = 128
    meta_tokens: int = 4

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.meta_tokens < 0:
            raise ConfigError("meta token count must be >= 0")


def build_swa_mask(L, cfg: SwaConfig, dtype=np.float32):
    """Additive [L, L] mask: entry (i, t) is 0 iff t <= i and
    (t < m or t > i - w), else -inf."""
    i = np.arange(L)[:, None]
    t = np.arange(L)[None, :]
    allowed = (t <= i) & ((t < cfg.meta_tokens) | (t > i - cfg.window))
    return np.where(allowed, 0.0, -np.inf).astype(dtype)


@lru_cache(maxsize=64)
def _window_index_map(L, w, m):
    """Slot layout for the banded form: m meta slots then w window slots.

    Returns (idx[L, m+w], addmask[L, m+w]). A meta slot is live only when its
    position falls outside the window range (the window slot covers it
    otherwise, so no position is ever counted twice).
    """
    S = m + w
    idx = np.zeros((L, S), dtype=np.int64)
    mask = np.full((L, S), -np.inf, dtype=np.float32)
    i = np.arange(L)[:, None]
    if m > 0:
        meta_t = np.arange(m)[None, :]
        live = (meta_t <= i) & (meta_t <= i - w)
        idx[:, :m] = np.where(live, meta_t, 0)
        mask[:, :m] = np.where(live, 0.0, -np.inf)
    win_t = i - w + 1 + np.arange(w)[None, :]
    live = win_t >= 0
    idx[:, m:] = np.where(live, win_t, 0)
    mask[:, m:] = np.where(live, 0.0, -np.inf)
    return idx, mask


def swa_forward(q: Tensor, k: Tensor, v: Tensor, cfg: SwaConfig, scale=None) -> Tensor:
    """Windowed attention over [..., L, d] inputs.

    Equivalent to full causal softmax attention with build_swa_mask in place
    of the causal mask, but evaluated over gathered (w+m)-wide slabs.
    """
    L, d = q.shape[-2], q.shape[-1]
    if scale is None:
        scale = 1.0 / float(np.sqrt(d))
    idx, addmask = _window_index_map(L, cfg.window, cfg.meta_tokens)
    kg = nc.take_time(k, idx)
    scores = nc.mul(nc.window_scores(q, kg), float(scale))
    weights = nc.masked_softmax_rows(scores, addmask.astype(q.dtype))
    return nc.window_mix(weights, nc.take_time(v, idx))


class SwaCache:
    """Bounded decode cache: m pinned meta entries plus a w-slot ring.

    Payload capacity is fixed at construction (2 * d * (w+m) floats per lead
    element); the ring overwrites its oldest slot once full. Single-owner:
    one cache per decode stream.
    """

    def __init__(self, cfg: SwaConfig, d, lead_shape=(), dtype=np.float32):
        self.cfg = cfg
        self.d = d
        self.lead = tuple(lead_shape)
        self.meta_k = np.zeros(self.lead + (cfg.meta_tokens, d), dtype=dtype)
        self.meta_v = np.zeros_like(self.meta_k)
        self.ring_k = np.zeros(self.lead + (cfg.window, d), dtype=dtype)
        self.ring_v = np.zeros_like(self.ring_k)
        self.step = 0

    def float_count(self):
        return int(self.meta_k.size + self.meta_v.size + self.ring_k.size + self.ring_v.size + 1)

    def positions(self):
        """Stream positions currently attendable, ascending."""
        m, w = self.cfg.meta_tokens, self.cfg.window
        metas = list(range(min(m, self.step)))
        ring_lo = max(m, self.step - w)
        return metas + list(range(ring_lo, self.step))

    def _gather(self):
        """Stored keys/values in ascending-position order."""
        m, w = self.cfg.meta_tokens, self.cfg.window
        ks, vs = [], []
        for p in self.positions():
            if p < m:
                ks.append(self.meta_k[..., p, :])
                vs.append(self.meta_v[..., p, :])
            else:
                slot = (p - m) % w
                ks.append(self.ring_k[..., slot, :])
                vs.append(self.ring_v[..., slot, :])
        return np.stack(ks, axis=-2), np.stack(vs, axis=-2)


def swa_cache_step(cache: SwaCache, q_t, k_t, v_t, scale=None, position=None):
    """Insert token t and return (y_t, cache). y_t equals row t of
    swa_forward on the full prefix. Steps must arrive in stream order."""
    t = cache.step
    if position is not None and position != t:
        raise ContractError(f"out-of-order cache step: expected {t}, got {position}")
    q = np.asarray(getattr(q_t, "data", q_t))
    k = np.asarray(getattr(k_t, "data", k_t))
    v = np.asarray(getattr(v_t, "data", v_t))
    if q.shape[-2] != 1:
        raise ContractError("cache step expects a single-token [..., 1, d] slice")
    m, w, d = cache.cfg.meta_tokens, cache.cfg.window, cache.d
    if scale is None:
        scale = 1.0 / float(np.sqrt(d))
    if t < m:
        cache.meta_k[..., t, :] = k[..., 0, :]
        cache.meta_v[..., t, :] = v[..., 0, :]
    else:
        slot = (t - m) % w
        cache.ring_k[..., slot, :] = k[..., 0, :]
        cache.ring_v[..., slot, :] = v[..., 0, :]
    cache.step = t + 1

    ks, vs = cache._gather()
    scores = np.einsum("...od,...sd->...os", q, ks) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    weights = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(q.dtype)
    y = np.einsum("...os,...sd->...od", weights, vs).astype(q.dtype)
    return Tensor(y), cache


def cache_from_prefix(k_full, v_full, cfg: SwaConfig, dtype=np.float32):
    """Build the cache state equivalent to streaming a length-L prefix."""
    k = np.asarray(getattr(k_full, "data", k_full))
    v = np.asarray(getattr(v_full, "data", v_full))
    L = k.shape[-2]
    cache = SwaCache(cfg, k.shape[-1], lead_shape=k.shape[:-2], dtype=dtype)
    m, w = cfg.meta_tokens, cfg.window
    n_meta = min(m, L)
    cache.meta_k[..., :n_meta, :] = k[..., :n_meta, :]
    cache.meta_v[..., :n_meta, :] = v[..., :n_meta, :]
    for p in range(max(m, L - w), L):
        slot = (p - m) % w
        cache.ring_k[..., slot, :] = k[..., p, :]
        cache.ring_v[..., slot, :] = v[..., p, :]
    cache.step = L
    return cache
