"""AdamW with decoupled weight decay, global-norm clipping, and the
warmup-then-cosine learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def lr_schedule(step, total_steps, peak_lr, warmup_frac=0.10, min_lr_ratio=0.1):
    """Linear 0 -> peak over the first warmup fraction of steps, then cosine
    from peak down to min_lr_ratio * peak at the final step."""
    if total_steps < 1:
        raise ContractError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_frac * total_steps
    if warmup > 0 and step < warmup:
        return peak_lr * step / warmup
    lo = min_lr_ratio * peak_lr
    denom = max(total_steps - warmup, 1e-12)
    progress = (step - warmup) / denom
    return lo + 0.5 * (1.0 + np.cos(np.pi * progress)) * (peak_lr - lo)


class AdamW:
    """Decoupled-weight-decay Adam over a list of Tensors.

    Gradients are read from each tensor's .grad (missing grads count as
    zero); call clip_global_norm before step, matching the training loops.
    """

    def __init__(self, params, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_global_norm(self):
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def clip_global_norm(self, max_norm):
        """Scale all gradients so their joint norm is at most max_norm.
        Returns the pre-clip norm."""
        norm = self.grad_global_norm()
        if not np.isfinite(norm):
            raise ContractError(f"non-finite gradient norm {norm}")
        if max_norm is not None and norm > max_norm > 0:
            scale = max_norm / norm
            for p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise ContractError(
                    f"non-finite gradient on tensor of shape {p.data.shape}"
                )
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - (lr * update).astype(p.data.dtype)
            if self.weight_decay:
                p.data = p.data - (lr * self.weight_decay) * p.data
