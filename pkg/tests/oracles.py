"""Independent reference implementations used as test oracles.

Everything here is written as a direct transcription of the underlying math
(triple loops, per-token sums, finite differences) at float64, deliberately
sharing no code with the library paths it checks.
"""

import numpy as np


def naive_matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_masked_softmax(scores, mask):
    """Per-element exp/sum evaluation, float64."""
    z = np.asarray(scores, dtype=np.float64) + np.asarray(mask, dtype=np.float64)
    out = np.zeros_like(z)
    for i in range(z.shape[0]):
        row = z[i]
        finite = np.isfinite(row)
        e = np.where(finite, np.exp(row - row[finite].max()), 0.0)
        out[i] = e / e.sum()
    return out


def naive_causal_attention(q, k, v, scale):
    """Per-token softmax attention sum at float64."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    L = q.shape[0]
    out = np.zeros_like(v)
    for i in range(L):
        logits = np.array([q[i] @ k[t] * scale for t in range(i + 1)])
        logits -= logits.max()
        w = np.exp(logits)
        w /= w.sum()
        out[i] = sum(w[t] * v[t] for t in range(i + 1))
    return out


def naive_gla(phi_q, phi_k, v, gamma, normalize=True):
    """Direct evaluation of the gated linear attention per-token double sum.

    y_i = phi_q(q_i)^T sum_t (prod_{l=t+1..i} Gamma_l) phi_k(k_t) v_t^T,
    optionally divided by the same sum applied to a ones value. gamma is
    [L, F] (already broadcast to the feature width F of phi_k).
    """
    phi_q = np.asarray(phi_q, dtype=np.float64)
    phi_k = np.asarray(phi_k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    L, F = phi_k.shape
    dv = v.shape[1]
    out = np.zeros((L, dv))
    for i in range(L):
        num = np.zeros(dv)
        den = 0.0
        for t in range(i + 1):
            decay = np.ones(F)
            for l in range(t + 1, i + 1):
                decay = decay * gamma[l]
            w = phi_q[i] @ (decay * phi_k[t])
            num += w * v[t]
            den += w
        out[i] = num / den if normalize else num
    return out


def naive_swa(q, k, v, w, m, scale):
    """Per-token sliding-window + meta attention sum at float64."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    L = q.shape[0]
    out = np.zeros_like(v)
    for i in range(L):
        allowed = sorted(set(range(min(m, i + 1))) | set(range(max(0, i - w + 1), i + 1)))
        logits = np.array([q[i] @ k[t] * scale for t in allowed])
        logits -= logits.max()
        weights = np.exp(logits)
        weights /= weights.sum()
        out[i] = sum(weights[j] * v[t] for j, t in enumerate(allowed))
    return out


def finite_difference_grad(f, x, h=1e-3):
    """Central finite differences of scalar f around array x, elementwise.

    f receives a float64 array and must return a python float computed at
    float64 precision.
    """
    x = np.array(x, dtype=np.float64)  # private copy; perturbation must not alias caller data
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-3, floor=1e-4, label=""):
    """Elementwise relative comparison with an absolute floor for tiny grads."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape, f"{label}: shape {analytic.shape} vs {numeric.shape}"
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    assert worst < rtol, f"{label}: max relative gradient error {worst:.3e} >= {rtol}"


def rel_err(a, b, floor=1e-12):
    """Max discrepancy relative to the overall output scale.

    Per-element relative error is meaningless on near-zero elements that are
    themselves cancellation residues, so kernel-equivalence checks normalize
    by the largest magnitude present in either array.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)
