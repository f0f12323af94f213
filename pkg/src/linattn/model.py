"""Tiny byte-level transformer teacher and its linearized student.

The teacher is a standard pre-norm transformer with rotary softmax attention.
The student shares its (frozen) backbone but replaces attention in
non-retained layers with the hybrid branch:

    y_head = gla(phi_q(q), phi_k(k), v, gates) + alpha_head * swa(q, k, v)

computed without rotary embeddings; gates are produced from the layer input,
feature maps are shared across heads of a layer, and alpha is a learnable
per-head mixing scalar. Retained layers keep the exact softmax path.

Stage-1 supervision is teacher-forced at the attention-input level: the
branches consume the teacher's pre-rotary Q/K and V, and are trained to match
the teacher's per-head attention outputs (before the output projection) under
a mean-over-layers squared Frobenius loss.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numcore as nc
from .errors import (
    ConfigError,
    ConfigMismatchError,
    ContractError,
    CorruptCheckpointError,
    PrecisionError,
)
from .features import (
    feature_apply,
    gate_values,
    init_feature_map,
    init_gate,
    unit_gates,
)
from .gla import ChunkPlan, RecurrentState, fresh_state, gla_chunkwise, gla_parallel, gla_recurrent, gla_step
from .numcore import Tensor
from .reference import RopeConfig, causal_softmax_attention, rope_transform
from .swa import SwaCache, SwaConfig, cache_from_prefix, swa_cache_step, swa_forward

CHECKPOINT_MAGIC = b"LZRD"
CHECKPOINT_VERSION = 1

# byte-level ids: 0..255 bytes, then BOS, PAD, and the reserved meta ids
BOS_ID = 256
PAD_ID = 257
META_BASE = 258


def vocab_size_for(meta_tokens):
    return META_BASE + meta_tokens


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    feature_dim: int = 64
    mlp_ratio: int = 2
    vocab_size: int = 0  # 0 -> derived from meta token count
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    swa: SwaConfig = field(default_factory=SwaConfig)
    gate_variant: str = "scalar"
    retain_full: tuple = ()
    use_swa: bool = True
    use_gate: bool = True
    algo: str = "chunkwise"  # recurrent | parallel | chunkwise
    chunk_size: int = 64
    normalize: bool = True
    match_post_proj: bool = False
    lora_rank: int = 8
    lora_alpha: float = 16.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if isinstance(self.swa, dict):
            self.swa = SwaConfig(**self.swa)
        self.retain_full = tuple(sorted(set(self.retain_full)))
        if any(i < 0 or i >= self.n_layers for i in self.retain_full):
            raise ConfigError("retained layer index out of range")
        if self.vocab_size == 0:
            self.vocab_size = vocab_size_for(self.swa.meta_tokens)
        if self.algo not in ("recurrent", "parallel", "chunkwise"):
            raise ConfigError(f"unknown algorithm {self.algo!r}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        d = asdict(self)
        d["retain_full"] = list(self.retain_full)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["retain_full"] = tuple(d.get("retain_full", ()))
        if isinstance(d.get("swa"), dict):
            d["swa"] = SwaConfig(**d["swa"])
        return cls(**d)


@dataclass
class LoraAdapter:
    """Low-rank delta on a frozen projection; B starts at zero so the adapted
    projection is exactly the frozen one at initialization."""

    a: Tensor
    b: Tensor
    rank: int
    alpha: float

    @property
    def scale(self):
        return self.alpha / self.rank


def init_lora(d_in, d_out, rank, alpha, rng, dtype=np.float32):
    a = rng.normal(0.0, 0.02, size=(d_in, rank)).astype(dtype)
    b = np.zeros((rank, d_out), dtype=dtype)
    return LoraAdapter(Tensor(a, requires_grad=True), Tensor(b, requires_grad=True), rank, alpha)


def lora_apply(adapter: LoraAdapter, w_frozen: Tensor, x: Tensor) -> Tensor:
    base = nc.matmul(x, w_frozen)
    if adapter is None:
        return base
    delta = nc.matmul(nc.matmul(x, adapter.a), adapter.b)
    return nc.add(base, nc.mul(delta, float(adapter.scale)))


class LayerParams:
    """Backbone weights of one transformer block (no biases)."""

    def __init__(self, cfg, rng, dtype):
        D, H = cfg.d_model, cfg.d_model * cfg.mlp_ratio
        std = 1.0 / np.sqrt(D)

        def w(shape, s=std):
            return Tensor(rng.normal(0.0, s, size=shape).astype(dtype), requires_grad=True)

        self.norm1 = Tensor(np.ones(D, dtype=dtype), requires_grad=True)
        self.wq, self.wk, self.wv, self.wo = (w((D, D)) for _ in range(4))
        self.norm2 = Tensor(np.ones(D, dtype=dtype), requires_grad=True)
        self.w1 = w((D, H))
        self.w2 = w((H, D), s=1.0 / np.sqrt(H))

    def named(self, prefix):
        return [
            (f"{prefix}.norm1", self.norm1),
            (f"{prefix}.wq", self.wq),
            (f"{prefix}.wk", self.wk),
            (f"{prefix}.wv", self.wv),
            (f"{prefix}.wo", self.wo),
            (f"{prefix}.norm2", self.norm2),
            (f"{prefix}.w1", self.w1),
            (f"{prefix}.w2", self.w2),
        ]


class HybridBranch:
    """Stage-1 modules of one linearized layer: feature-map pair, gate
    parameters, per-head mixing scalars, optional adapters."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        dh, f = cfg.head_dim, cfg.feature_dim
        self.fmap_q = init_feature_map(dh, f, rng, dtype=dtype)
        self.fmap_k = init_feature_map(dh, f, rng, dtype=dtype)
        self.gate = init_gate(cfg.gate_variant, cfg.d_model, 2 * f, rng, dtype=dtype)
        self.alpha = Tensor(np.ones((cfg.n_heads, 1, 1), dtype=dtype), requires_grad=True)
        self.lora_q = self.lora_k = self.lora_v = None

    def attach_lora(self, cfg, rng, dtype):
        D = cfg.d_model
        self.lora_q = init_lora(D, D, cfg.lora_rank, cfg.lora_alpha, rng, dtype)
        self.lora_k = init_lora(D, D, cfg.lora_rank, cfg.lora_alpha, rng, dtype)
        self.lora_v = init_lora(D, D, cfg.lora_rank, cfg.lora_alpha, rng, dtype)

    def named(self, prefix):
        out = [
            (f"{prefix}.fmap_q", self.fmap_q.weight),
            (f"{prefix}.fmap_k", self.fmap_k.weight),
            (f"{prefix}.alpha", self.alpha),
        ]
        for pname, p in sorted(self.gate.params.items()):
            out.append((f"{prefix}.gate.{pname}", p))
        for tag, ad in (("lq", self.lora_q), ("lk", self.lora_k), ("lv", self.lora_v)):
            if ad is not None:
                out.append((f"{prefix}.{tag}.a", ad.a))
                out.append((f"{prefix}.{tag}.b", ad.b))
        return out

    def stage1_params(self):
        return [self.fmap_q.weight, self.fmap_k.weight, self.alpha] + self.gate.trainable()

    def lora_params(self):
        out = []
        for ad in (self.lora_q, self.lora_k, self.lora_v):
            if ad is not None:
                out.extend([ad.a, ad.b])
        return out


@dataclass
class TeacherRecord:
    """Per-layer supervision capture: post-norm layer input, pre-rotary Q/K,
    V (all split per head where applicable), and the per-head attention
    output before the output projection."""

    layer: int
    x: Tensor
    q: Tensor
    k: Tensor
    v: Tensor
    y_heads: Tensor


def rmsnorm(x, g, eps):
    ms = nc.mean_last(nc.mul(x, x))
    return nc.mul(nc.div(x, nc.sqrt(nc.add(ms, float(eps)))), g)


class Transformer:
    """Teacher (kind='softmax') or linearized student (kind='hybrid')."""

    def __init__(self, cfg: ModelConfig, kind="softmax", seed=0, dtype=np.float32):
        if kind not in ("softmax", "hybrid"):
            raise ConfigError(f"unknown model kind {kind!r}")
        self.cfg = cfg
        self.kind = kind
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        D, V = cfg.d_model, cfg.vocab_size
        self.tok_emb = Tensor(rng.normal(0, 0.02, size=(V, D)).astype(dtype), requires_grad=True)
        self.layers = [LayerParams(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.final_norm = Tensor(np.ones(D, dtype=dtype), requires_grad=True)
        self.w_out = Tensor(
            rng.normal(0, 1.0 / np.sqrt(D), size=(D, V)).astype(dtype), requires_grad=True
        )
        self.branches = {}
        if kind == "hybrid":
            for i in range(cfg.n_layers):
                if i not in cfg.retain_full:
                    self.branches[i] = HybridBranch(cfg, rng, dtype)
        self.rope = RopeConfig(cfg.head_dim, cfg.rope_base)

    # -- parameter bookkeeping -------------------------------------------

    def named_base_params(self):
        out = [("tok_emb", self.tok_emb)]
        for i, layer in enumerate(self.layers):
            out.extend(layer.named(f"layer{i}"))
        out.append(("final_norm", self.final_norm))
        out.append(("w_out", self.w_out))
        return out

    def named_params(self):
        out = self.named_base_params()
        for i in sorted(self.branches):
            out.extend(self.branches[i].named(f"branch{i}"))
        return out

    def base_params(self):
        return [t for _, t in self.named_base_params()]

    def stage1_params(self):
        out = []
        for i in sorted(self.branches):
            out.extend(self.branches[i].stage1_params())
        return out

    def lora_params(self):
        out = []
        for i in sorted(self.branches):
            out.extend(self.branches[i].lora_params())
        return out

    def freeze_base(self):
        for t in self.base_params():
            t.requires_grad = False
            t.grad = None

    def unfreeze_base(self):
        for t in self.base_params():
            t.requires_grad = True

    def base_hash(self):
        h = hashlib.sha256()
        for name, t in self.named_base_params():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def attach_lora(self, seed=1):
        rng = np.random.default_rng(seed)
        for i in sorted(self.branches):
            self.branches[i].attach_lora(self.cfg, rng, self.dtype)

    # -- shape plumbing -----------------------------------------------------

    def _split_heads(self, t):
        B, L, D = t.shape
        H, dh = self.cfg.n_heads, self.cfg.head_dim
        return nc.moveaxis(nc.reshape(t, (B, L, H, dh)), -2, -3)  # [B,H,L,dh]

    def _merge_heads(self, t):
        B, H, L, dh = t.shape
        return nc.reshape(nc.moveaxis(t, -3, -2), (B, L, H * dh))

    def _rope_heads(self, t, positions):
        return rope_transform(t, positions, self.rope)

    # -- attention paths ------------------------------------------------------

    def _proj_heads(self, h, layer, lora=None):
        q = self._split_heads(lora_apply(getattr(lora, "lora_q", None) if lora else None, layer.wq, h))
        k = self._split_heads(lora_apply(getattr(lora, "lora_k", None) if lora else None, layer.wk, h))
        v = self._split_heads(lora_apply(getattr(lora, "lora_v", None) if lora else None, layer.wv, h))
        return q, k, v

    def _softmax_attention(self, q, k, v, positions):
        qr = self._rope_heads(q, positions)
        kr = self._rope_heads(k, positions)
        return causal_softmax_attention(qr, kr, v, 1.0 / np.sqrt(self.cfg.head_dim))

    def _layer_gates(self, branch, h, k_heads, L):
        """GateValues broadcastable against [B,H,L,*]."""
        if not self.cfg.use_gate:
            return unit_gates((1, 1), L, dtype=self.dtype)
        if branch.gate.variant == "pooling":
            return gate_values(branch.gate, k=k_heads)
        gv = gate_values(branch.gate, x=h)
        B = h.shape[0]
        gamma = nc.reshape(gv.gamma, (B, 1, L, gv.gamma.shape[-1]))
        log_c = nc.reshape(gv.log_c, (B, 1, L, gv.log_c.shape[-1]))
        from .features import GateValues as GV

        return GV(gamma=gamma, log_c=log_c)

    def _gla_branch(self, branch, q, k, v, gates):
        algo = self.cfg.algo
        plan = ChunkPlan(chunk_size=self.cfg.chunk_size)
        maps = (branch.fmap_q, branch.fmap_k)
        if algo == "parallel":
            try:
                phi_q = feature_apply(maps[0], q)
                phi_k = feature_apply(maps[1], k)
                return gla_parallel(phi_q, phi_k, v, gates, normalize=self.cfg.normalize)
            except PrecisionError:
                algo = "chunkwise"  # guard tripped: escalate to the stable path
        if algo == "chunkwise":
            return gla_chunkwise(
                q, k, v, gates.log_c, maps, plan, normalize=self.cfg.normalize
            )
        phi_q = feature_apply(maps[0], q)
        phi_k = feature_apply(maps[1], k)
        y, _ = gla_recurrent(phi_q, phi_k, v, gates, normalize=self.cfg.normalize)
        return y

    def hybrid_heads(self, layer_idx, h, q, k, v):
        """Per-head hybrid output for given inputs: gla + alpha * swa."""
        branch = self.branches[layer_idx]
        gates = self._layer_gates(branch, h, k, q.shape[-2])
        y = self._gla_branch(branch, q, k, v, gates)
        if self.cfg.use_swa:
            y_swa = swa_forward(q, k, v, self.cfg.swa, 1.0 / np.sqrt(self.cfg.head_dim))
            y = nc.add(y, nc.mul(branch.alpha, y_swa))
        return y

    # -- full forward ---------------------------------------------------------

    def forward(self, ids, collect=False):
        """Token ids [L] or [B, L] -> logits (and records when collect)."""
        ids = np.asarray(ids)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        B, L = ids.shape
        positions = list(range(L))
        x = nc.embedding(self.tok_emb, ids)
        records = []
        for i, layer in enumerate(self.layers):
            h = rmsnorm(x, layer.norm1, self.cfg.norm_eps)
            hybrid = self.kind == "hybrid" and i in self.branches
            branch = self.branches.get(i)
            q, k, v = self._proj_heads(h, layer, lora=branch if hybrid else None)
            if hybrid:
                y_heads = self.hybrid_heads(i, h, q, k, v)
            else:
                y_heads = self._softmax_attention(q, k, v, positions)
                if collect:
                    records.append(
                        TeacherRecord(
                            layer=i,
                            x=h.detach(),
                            q=q.detach(),
                            k=k.detach(),
                            v=v.detach(),
                            y_heads=y_heads.detach(),
                        )
                    )
            x = nc.add(x, nc.matmul(self._merge_heads(y_heads), layer.wo))
            h2 = rmsnorm(x, layer.norm2, self.cfg.norm_eps)
            a = nc.matmul(h2, layer.w1)
            x = nc.add(x, nc.matmul(nc.mul(a, nc.sigmoid(a)), layer.w2))
        xf = rmsnorm(x, self.final_norm, self.cfg.norm_eps)
        logits = nc.matmul(xf, self.w_out)
        if squeeze:
            logits = nc.reshape(logits, (L, self.cfg.vocab_size))
        return (logits, records) if collect else logits

    def forward_collect(self, ids):
        """Frozen-teacher supervision capture; one record per softmax layer."""
        _, records = self.forward(ids, collect=True)
        return records


def build_student(teacher: Transformer, seed=0, **overrides) -> Transformer:
    """Clone the teacher backbone into a hybrid student. Base weights are
    copied bitwise and frozen; branch modules are freshly initialized."""
    cfg = ModelConfig.from_dict({**teacher.cfg.to_dict(), **overrides})
    student = Transformer(cfg, kind="hybrid", seed=seed, dtype=teacher.dtype)
    src = dict(teacher.named_base_params())
    for name, t in student.named_base_params():
        t.data = src[name].data.copy()
    student.freeze_base()
    return student


# -- losses --------------------------------------------------------------------


def stage1_mse_loss(records, student: Transformer):
    """Mean over layers of the squared Frobenius distance between teacher
    attention outputs and the hybrid approximation (averaged over batch
    examples). Only stage-1 module parameters receive gradients: the records
    are detached and the student base is frozen."""
    by_layer = {r.layer: r for r in records}
    layer_ids = sorted(student.branches)
    missing = [li for li in layer_ids if li not in by_layer]
    if missing:
        raise ContractError(f"no teacher record for linearized layers {missing}")
    total = None
    for li in layer_ids:
        rec = by_layer[li]
        y_hat = student.hybrid_heads(li, rec.x, rec.q, rec.k, rec.v)
        target = rec.y_heads
        if student.cfg.match_post_proj:
            wo = student.layers[li].wo
            y_hat = nc.matmul(student._merge_heads(y_hat), wo)
            target = nc.matmul(student._merge_heads(target), wo)
        diff = nc.sub(y_hat, target)
        B = rec.x.shape[0]
        sq = nc.div(nc.reduce_sum(nc.mul(diff, diff)), float(B))
        total = sq if total is None else nc.add(total, sq)
    return nc.div(total, float(len(layer_ids)))


def lm_loss(logits, ids):
    """Mean next-token negative log-likelihood: targets are the inputs
    shifted left by one, the final position is excluded."""
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
        logits = nc.reshape(logits, (1,) + logits.shape)
    L = ids.shape[1]
    pred = nc.slice_axis(logits, -2, 0, L - 1)
    return nc.cross_entropy_mean(pred, ids[:, 1:])


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: Transformer, path):
    entries = []
    payload = bytearray()
    for name, t in model.named_params():
        arr = np.ascontiguousarray(t.data.astype("<f4"))
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": len(payload)}
        )
        payload.extend(arr.tobytes())
    header = {
        "config": model.cfg.to_dict(),
        "kind": model.kind,
        "tensors": entries,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        fh.write(bytes(payload))
    return path


def load_checkpoint(path, expect_config: ModelConfig = None):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("bad magic")
    version = int(np.frombuffer(raw[4:8], dtype=np.uint32)[0])
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"unsupported version {version}")
    hlen = int(np.frombuffer(raw[8:12], dtype=np.uint32)[0])
    if len(raw) < 12 + hlen:
        raise CorruptCheckpointError("truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError("unparseable header") from e
    cfg = ModelConfig.from_dict(header["config"])
    if expect_config is not None and expect_config.to_dict() != cfg.to_dict():
        raise ConfigMismatchError("checkpoint config does not match expectation")
    model = Transformer(cfg, kind=header.get("kind", "softmax"), seed=0)
    if header.get("kind") == "hybrid" and any(
        e["name"].endswith(".lq.a") for e in header["tensors"]
    ):
        model.attach_lora()
    named = dict(model.named_params())
    body = raw[12 + hlen :]
    seen = set()
    for e in header["tensors"]:
        if e["name"] not in named:
            raise ConfigMismatchError(f"unexpected tensor {e['name']}")
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        start, stop = e["offset"], e["offset"] + 4 * n
        if stop > len(body):
            raise CorruptCheckpointError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(body[start:stop], dtype="<f4").reshape(shape).copy()
        if named[e["name"]].data.shape != arr.shape:
            raise ConfigMismatchError(f"shape mismatch for {e['name']}")
        named[e["name"]].data = arr
        seen.add(e["name"])
    missing = set(named) - seen
    if missing:
        raise CorruptCheckpointError(f"missing tensors: {sorted(missing)[:3]}")
    if model.kind == "hybrid":
        model.freeze_base()
    return model


# -- decode sessions -------------------------------------------------------------


class DecodeSession:
    """Single-owner autoregressive decode state.

    Hybrid layers carry a RecurrentState plus a bounded window cache; retained
    softmax layers carry a growing rotated-key/value cache."""

    def __init__(self, model: Transformer):
        self.model = model
        self.position = 0
        cfg = model.cfg
        H, dh, f = cfg.n_heads, cfg.head_dim, cfg.feature_dim
        self.layer_state = []
        for i in range(cfg.n_layers):
            if i in model.branches:
                self.layer_state.append(
                    {
                        "rec": fresh_state((H,), 2 * f, dh, dtype=model.dtype),
                        "swa": SwaCache(cfg.swa, dh, lead_shape=(H,), dtype=model.dtype),
                    }
                )
            else:
                self.layer_state.append({"k": [], "v": []})

    def float_count(self):
        n = 1  # position counter
        for st in self.layer_state:
            if "rec" in st:
                n += st["rec"].float_count() + st["swa"].float_count()
            else:
                n += sum(int(np.asarray(a).size) for a in st["k"])
                n += sum(int(np.asarray(a).size) for a in st["v"])
        return n


def start_session(model: Transformer) -> DecodeSession:
    return DecodeSession(model)


def decode_prefill(model: Transformer, ids) -> DecodeSession:
    """Consume a prompt in one batched forward, producing the same session a
    token-by-token decode would have produced (and the last-token logits)."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ContractError("prefill expects a single sequence")
    session = DecodeSession(model)
    L = ids.shape[0]
    cfg = model.cfg
    x = nc.embedding(model.tok_emb, ids[None, :])
    positions = list(range(L))
    for i, layer in enumerate(model.layers):
        h = rmsnorm(x, layer.norm1, cfg.norm_eps)
        hybrid = i in model.branches
        branch = model.branches.get(i)
        q, k, v = model._proj_heads(h, layer, lora=branch if hybrid else None)
        if hybrid:
            gates = model._layer_gates(branch, h, k, L)
            log_c = gates.log_c
            y_gla, state = gla_chunkwise(
                q, k, v, log_c, (branch.fmap_q, branch.fmap_k),
                ChunkPlan(chunk_size=cfg.chunk_size), normalize=cfg.normalize,
                return_state=True,
            )
            st = session.layer_state[i]
            st["rec"] = RecurrentState(
                Tensor(state.s.data[0].copy()), Tensor(state.z.data[0].copy()), L
            )
            st["swa"] = cache_from_prefix(k.data[0], v.data[0], cfg.swa, dtype=model.dtype)
            y_heads = y_gla
            if cfg.use_swa:
                y_swa = swa_forward(q, k, v, cfg.swa, 1.0 / np.sqrt(cfg.head_dim))
                y_heads = nc.add(y_gla, nc.mul(branch.alpha, y_swa))
        else:
            qr = model._rope_heads(q, positions)
            kr = model._rope_heads(k, positions)
            y_heads = causal_softmax_attention(qr, kr, v, 1.0 / np.sqrt(cfg.head_dim))
            st = session.layer_state[i]
            st["k"] = [kr.data[0, :, t, :].copy() for t in range(L)]
            st["v"] = [v.data[0, :, t, :].copy() for t in range(L)]
        x = nc.add(x, nc.matmul(model._merge_heads(y_heads), layer.wo))
        h2 = rmsnorm(x, layer.norm2, cfg.norm_eps)
        a = nc.matmul(h2, layer.w1)
        x = nc.add(x, nc.matmul(nc.mul(a, nc.sigmoid(a)), layer.w2))
    session.position = L
    xf = rmsnorm(x, model.final_norm, cfg.norm_eps)
    logits = nc.matmul(xf, model.w_out)
    session.last_logits = logits.data[0, -1]
    return session


def student_decode_step(session: DecodeSession, token_id):
    """One constant-memory decode step; returns (logits row, session)."""
    model = session.model
    cfg = model.cfg
    t = session.position
    H, dh = cfg.n_heads, cfg.head_dim
    x = nc.embedding(model.tok_emb, np.array([[token_id]]))  # [1,1,D]
    for i, layer in enumerate(model.layers):
        h = rmsnorm(x, layer.norm1, cfg.norm_eps)
        st = session.layer_state[i]
        hybrid = i in model.branches
        branch = model.branches.get(i)
        q, k, v = model._proj_heads(h, layer, lora=branch if hybrid else None)
        q1 = nc.reshape(q, (H, 1, dh))
        k1 = nc.reshape(k, (H, 1, dh))
        v1 = nc.reshape(v, (H, 1, dh))
        if hybrid:
            if cfg.use_gate:
                if branch.gate.variant == "pooling":
                    gv = gate_values(branch.gate, k=k1)
                    gamma_t = gv.gamma
                else:
                    gv = gate_values(branch.gate, x=nc.reshape(h, (1, cfg.d_model)))
                    gamma_t = nc.reshape(gv.gamma, (1, 1, gv.gamma.shape[-1]))
            else:
                gamma_t = Tensor(np.ones((1, 1, 1), dtype=model.dtype))
            phi_q = feature_apply(branch.fmap_q, q1)
            phi_k = feature_apply(branch.fmap_k, k1)
            y_gla, st["rec"] = gla_step(
                st["rec"], phi_q, phi_k, v1, gamma_t, normalize=cfg.normalize
            )
            y_heads = y_gla
            if cfg.use_swa:
                y_swa, st["swa"] = swa_cache_step(
                    st["swa"], q1, k1, v1, 1.0 / np.sqrt(dh), position=t
                )
                y_heads = nc.add(y_gla, nc.mul(branch.alpha, y_swa))
        else:
            qr = model._rope_heads(q1, [t])
            kr = model._rope_heads(k1, [t])
            st["k"].append(kr.data[:, 0, :].copy())
            st["v"].append(v1.data[:, 0, :].copy())
            ks = Tensor(np.stack(st["k"], axis=1))  # [H, t+1, dh]
            vs = Tensor(np.stack(st["v"], axis=1))
            scores = nc.mul(nc.matmul(qr, nc.transpose(ks)), 1.0 / np.sqrt(dh))
            weights = nc.masked_softmax_rows(scores)
            y_heads = nc.matmul(weights, vs)
        merged = nc.reshape(nc.moveaxis(y_heads, 0, 1), (1, 1, cfg.d_model))
        x = nc.add(x, nc.matmul(merged, layer.wo))
        h2 = rmsnorm(x, layer.norm2, cfg.norm_eps)
        a = nc.matmul(h2, layer.w1)
        x = nc.add(x, nc.matmul(nc.mul(a, nc.sigmoid(a)), layer.w2))
    session.position = t + 1
    xf = rmsnorm(x, model.final_norm, cfg.norm_eps)
    logits = nc.matmul(xf, model.w_out)
    return logits.data[0, 0], session


def greedy_generate(model: Transformer, prompt_ids, n_tokens):
    """Greedy continuation of a prompt via prefill + streaming steps."""
    prompt_ids = np.asarray(prompt_ids)
    session = decode_prefill(model, prompt_ids)
    out = []
    logits = session.last_logits
    for _ in range(n_tokens):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        logits, session = student_decode_step(session, nxt)
    return np.array(out, dtype=np.int64), session
