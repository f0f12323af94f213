"""Dense-tensor algebra with reverse-mode automatic differentiation.

Covers exactly the operation set the rest of the package needs: matmuls,
elementwise math, masked row softmax, windowed gather/score/mix kernels,
embedding lookup and cross-entropy. Storage is float32 by default with
float64 accumulation inside reductions and softmax denominators; every
kernel also runs unchanged at float64 for oracle work.

The tape is rebuilt per forward pass (define-by-run): each produced tensor
keeps its parents and a backward closure, and ``backward`` walks the graph
once in reverse topological order. Only leaf tensors with
``requires_grad=True`` receive a ``.grad`` accumulator.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ContractError,
    DegenerateRowError,
    NonFiniteError,
    ShapeError,
)

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "softplus",
    "clip",
    "transpose",
    "moveaxis",
    "reshape",
    "concat",
    "concat_last",
    "slice_axis",
    "cumsum_time",
    "reduce_sum",
    "mean_all",
    "mean_last",
    "masked_softmax_rows",
    "take_time",
    "window_scores",
    "window_mix",
    "embedding",
    "cross_entropy_mean",
    "logsumexp_last",
    "multiply_counter",
    "no_finite_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class _MultiplyCounter:
    """Global counter of explicit scalar multiplications in forward ops.

    Counts multiply/divide flops analytically from operand shapes (matmul
    products, elementwise products, windowed score/mix products, softmax
    divisions). Transcendentals and additions are not counted. Used by the
    complexity-scaling benchmarks; exact, so linear/quadratic fits are exact.
    """

    def __init__(self):
        self.active = False
        self.multiplies = 0

    def add(self, n):
        if self.active:
            self.multiplies += int(n)

    def __enter__(self):
        self.active = True
        self.multiplies = 0
        return self

    def __exit__(self, *exc):
        self.active = False
        return False


multiply_counter = _MultiplyCounter()


class _FiniteCheck:
    """Finite-output validation toggle; on by default."""

    def __init__(self):
        self.enabled = True


_finite = _FiniteCheck()


class no_finite_check:
    """Context manager that suspends output finiteness validation.

    Only used by tests that deliberately probe non-finite behaviour.
    """

    def __enter__(self):
        self._prev = _finite.enabled
        _finite.enabled = False
        return self

    def __exit__(self, *exc):
        _finite.enabled = self._prev
        return False


def _check_finite(arr, op):
    if not _finite.enabled:
        return
    # A single f64 sum detects any NaN/Inf: NaN propagates, +/-Inf survives or
    # cancels to NaN, and no finite f32/f64 array can overflow an f64 sum.
    s = float(np.sum(arr, dtype=np.float64))
    if not np.isfinite(s):
        if np.isfinite(arr).all():
            return
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A dense row-major array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        _check_finite(self.data, "tensor")

    # -- construction used by ops ------------------------------------------

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        needs = any(p.requires_grad for p in parents)
        if needs:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        _check_finite(data, op)
        return out

    # -- basic protocol -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward pass ------------------------------------------------------

    def backward(self):
        """Populate ``.grad`` on every reachable requires-grad leaf.

        Gradients accumulate additively across repeated calls.
        """
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss")
        order = _toposort(self)
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    prev = flowing.get(id(parent))
                    flowing[id(parent)] = pg if prev is None else prev + pg
            elif node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic --------------------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return Tensor._from_op(out, (a, b), backward, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return Tensor._from_op(out, (a, b), backward, "sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    multiply_counter.add(out.size)

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return Tensor._from_op(out, (a, b), backward, "mul")


def div(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: {a.shape} vs {b.shape}") from e
    multiply_counter.add(out.size)

    def backward(g):
        return (
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        )

    return Tensor._from_op(out, (a, b), backward, "div")


def neg(a):
    out = -a.data

    def backward(g):
        return ((a, -g),)

    return Tensor._from_op(out, (a,), backward, "neg")


def matmul(a, b):
    """Matrix product. Supports 2D x 2D and stacked leading dims on either
    side (a shared 2D weight against a batched operand is the common case)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires >= 2 dims on both operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: {a.shape} vs {b.shape}") from e
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    multiply_counter.add(batch * out.shape[-2] * a.shape[-1] * out.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return Tensor._from_op(out, (a, b), backward, "matmul")


# -- elementwise -------------------------------------------------------------


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return ((a, g * out),)

    return Tensor._from_op(out, (a,), backward, "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        return ((a, g / a.data),)

    return Tensor._from_op(out, (a,), backward, "log")


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        return ((a, g * (0.5 / out)),)

    return Tensor._from_op(out, (a,), backward, "sqrt")


def sigmoid(a):
    # exp(-|x|) form avoids overflow on both tails
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    out = out.astype(x.dtype)

    def backward(g):
        return ((a, g * out * (1.0 - out)),)

    return Tensor._from_op(out, (a,), backward, "sigmoid")


def softplus(a):
    out = np.logaddexp(0.0, a.data).astype(a.dtype)

    def backward(g):
        x = a.data
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        return ((a, g * sig.astype(x.dtype)),)

    return Tensor._from_op(out, (a,), backward, "softplus")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only through unclipped entries."""
    out = np.clip(a.data, lo, hi)

    def backward(g):
        inside = (a.data >= lo) & (a.data <= hi)
        return ((a, g * inside.astype(a.dtype)),)

    return Tensor._from_op(out, (a,), backward, "clip")


# -- structure ---------------------------------------------------------------


def transpose(a):
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError("transpose requires >= 2 dims")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))

    def backward(g):
        return ((a, np.swapaxes(g, -1, -2)),)

    return Tensor._from_op(out, (a,), backward, "transpose")


def moveaxis(a, src, dst):
    out = np.ascontiguousarray(np.moveaxis(a.data, src, dst))

    def backward(g):
        return ((a, np.moveaxis(g, dst, src)),)

    return Tensor._from_op(out, (a,), backward, "moveaxis")


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape {a.shape} -> {shape}") from e

    def backward(g):
        return ((a, g.reshape(a.shape)),)

    return Tensor._from_op(np.ascontiguousarray(out), (a,), backward, "reshape")


def concat(parts, axis):
    parts = list(parts)
    if axis not in (-1, -2):
        raise ShapeError("concat supports axis -1 or -2 only")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        grads = []
        start = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(start, start + n)
            grads.append((p, np.ascontiguousarray(g[tuple(sl)])))
            start += n
        return tuple(grads)

    return Tensor._from_op(out, tuple(parts), backward, "concat")


def concat_last(*parts):
    return concat(parts, axis=-1)


def slice_axis(a, axis, start, stop):
    nd = a.data.ndim
    ax = axis if axis >= 0 else nd + axis
    sl = [slice(None)] * nd
    sl[ax] = slice(start, stop)
    out = np.ascontiguousarray(a.data[tuple(sl)])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[tuple(sl)] = g
        return ((a, ga),)

    return Tensor._from_op(out, (a,), backward, "slice")


def cumsum_time(a):
    """Cumulative sum over the time axis (second-to-last), f64 accumulation."""
    if a.data.ndim < 2:
        raise ShapeError("cumsum_time requires >= 2 dims")
    out = np.cumsum(a.data, axis=-2, dtype=np.float64).astype(a.dtype)

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=-2), axis=-2, dtype=np.float64), axis=-2)
        return ((a, rev.astype(a.dtype)),)

    return Tensor._from_op(out, (a,), backward, "cumsum_time")


def reduce_sum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    out = np.asarray(out)

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            return ((a, np.broadcast_to(g.reshape(()), a.shape).astype(a.dtype)),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return Tensor._from_op(out, (a,), backward, "reduce_sum")


def mean_all(a):
    n = a.data.size
    out = np.asarray(np.sum(a.data, dtype=np.float64) / n).astype(a.dtype)

    def backward(g):
        return ((a, np.broadcast_to(np.asarray(g).reshape(()), a.shape).astype(a.dtype) / n),)

    return Tensor._from_op(out, (a,), backward, "mean_all")


def mean_last(a, keepdims=True):
    """Mean pool over the trailing (channel) axis."""
    n = a.shape[-1]
    out = (np.sum(a.data, axis=-1, keepdims=keepdims, dtype=np.float64) / n).astype(a.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, -1)
        return ((a, np.broadcast_to(g / n, a.shape).astype(a.dtype)),)

    return Tensor._from_op(out, (a,), backward, "mean_last")


def logsumexp_last(a):
    """Row-stable log-sum-exp over the trailing axis, keepdims.

    The max is treated as a constant shift, which keeps the gradient exact.
    """
    m = np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = np.sum(e, axis=-1, keepdims=True, dtype=np.float64)
    out = (m + np.log(s)).astype(a.dtype)

    def backward(g):
        soft = (e / s).astype(a.dtype)
        return ((a, g * soft),)

    return Tensor._from_op(out, (a,), backward, "logsumexp_last")


# -- attention kernels --------------------------------------------------------


def masked_softmax_rows(scores, mask=None):
    """Row softmax with an additive 0/-inf mask over the trailing axis.

    Max-subtracted per row; denominator accumulated at f64; masked entries
    are exactly zero in the output. A fully masked row raises
    DegenerateRowError.
    """
    z = scores.data if mask is None else scores.data + mask
    live = np.isfinite(z)
    if not live.any(axis=-1).all():
        raise DegenerateRowError("softmax row with every entry masked")
    m = np.max(np.where(live, z, -np.inf), axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        e = np.where(live, np.exp(z - m), 0.0)
    denom = np.sum(e, axis=-1, keepdims=True, dtype=np.float64)
    out = (e / denom).astype(scores.dtype)
    multiply_counter.add(out.size)

    def backward(g):
        inner = np.sum(g * out, axis=-1, keepdims=True, dtype=np.float64)
        return ((scores, (out * (g - inner)).astype(scores.dtype)),)

    return Tensor._from_op(out, (scores,), backward, "masked_softmax_rows")


def take_time(a, idx):
    """Gather rows along the time axis: a[..., L, d] with idx[L, S] ->
    [..., L, S, d]. Backward scatter-adds into the source."""
    idx = np.asarray(idx)
    if idx.ndim != 2:
        raise ShapeError("take_time expects a 2D index map")
    out = np.ascontiguousarray(a.data[..., idx, :])

    def backward(g):
        ga = np.zeros_like(a.data)
        if ga.ndim == 2:
            np.add.at(ga, idx, g)
        else:
            lead = ga.shape[:-2]
            flat = ga.reshape((-1,) + ga.shape[-2:])
            gf = g.reshape((-1,) + g.shape[-3:])
            for i in range(flat.shape[0]):
                np.add.at(flat[i], idx, gf[i])
            ga = flat.reshape(ga.shape)
        return ((a, ga),)

    return Tensor._from_op(out, (a,), backward, "take_time")


def window_scores(q, kg):
    """Dot products of each query against its gathered key slab:
    q[..., L, d] x kg[..., L, S, d] -> [..., L, S]."""
    if q.shape[-1] != kg.shape[-1] or q.shape[-2] != kg.shape[-3]:
        raise ShapeError(f"window_scores: {q.shape} vs {kg.shape}")
    out = np.einsum("...ld,...lsd->...ls", q.data, kg.data)
    multiply_counter.add(out.size * q.shape[-1])

    def backward(g):
        gq = np.einsum("...ls,...lsd->...ld", g, kg.data)
        gk = np.einsum("...ls,...ld->...lsd", g, q.data)
        return ((q, gq.astype(q.dtype)), (kg, gk.astype(kg.dtype)))

    return Tensor._from_op(out, (q, kg), backward, "window_scores")


def window_mix(p, vg):
    """Weighted sum of gathered values: p[..., L, S] x vg[..., L, S, d] ->
    [..., L, d]."""
    if p.shape[-1] != vg.shape[-2] or p.shape[-2] != vg.shape[-3]:
        raise ShapeError(f"window_mix: {p.shape} vs {vg.shape}")
    out = np.einsum("...ls,...lsd->...ld", p.data, vg.data)
    multiply_counter.add(out.size * p.shape[-1])

    def backward(g):
        gp = np.einsum("...ld,...lsd->...ls", g, vg.data)
        gv = np.einsum("...ls,...ld->...lsd", p.data, g)
        return ((p, gp.astype(p.dtype)), (vg, gv.astype(vg.dtype)))

    return Tensor._from_op(out, (p, vg), backward, "window_mix")


# -- embedding / loss ---------------------------------------------------------


def embedding(table, ids):
    """Row lookup: table[V, D] indexed by integer ids of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError("embedding id out of range")
    out = np.ascontiguousarray(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return ((table, gt),)

    return Tensor._from_op(out, (table,), backward, "embedding")


def cross_entropy_mean(logits, targets):
    """Mean negative log-likelihood of integer targets under row softmax.

    logits: [..., V]; targets: integer array matching the leading shape.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ContractError("target id out of vocabulary range")
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    m = np.max(flat, axis=-1, keepdims=True)
    e = np.exp(flat - m)
    denom = np.sum(e, axis=-1, keepdims=True, dtype=np.float64)
    logp = (flat - m) - np.log(denom)
    n = flat.shape[0]
    out = np.asarray(-np.sum(logp[np.arange(n), t], dtype=np.float64) / n).astype(
        logits.dtype
    )

    def backward(g):
        soft = (e / denom).astype(logits.dtype)
        soft[np.arange(n), t] -= 1.0
        gl = soft * (np.asarray(g).reshape(()) / n)
        return ((logits, gl.reshape(logits.shape).astype(logits.dtype)),)

    return Tensor._from_op(out, (logits,), backward, "cross_entropy_mean")
