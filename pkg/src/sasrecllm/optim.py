"""AdamW with decoupled weight decay, cosine LR schedule, gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Parameter


class AdamW:
    """Bias-corrected Adam moments plus decoupled weight decay.

    The decay term w <- w - lr*lambda*w is applied separately from the
    moment-based step, so it never enters the moment statistics. Frozen
    parameters are skipped entirely: their bytes are invariant across steps.
    """

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        """One update over all trainable parameters at the given LR."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if not p.trainable:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data -= p.data.dtype.type(lr * self.weight_decay) * p.data
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def grad_global_norm(self) -> float:
        sq = 0.0
        for p in self.params:
            if p.trainable:
                sq += float(np.sum(p.grad.astype(np.float64) ** 2))
        return math.sqrt(sq)

    def clip_grad_norm(self, max_norm: float) -> float:
        """Scale all trainable grads so the global norm is <= max_norm."""
        norm = self.grad_global_norm()
        if norm > max_norm > 0.0:
            scale = max_norm / norm
            for p in self.params:
                if p.trainable:
                    p.grad *= p.grad.dtype.type(scale)
        return norm


def cosine_lr(step: int, warmup_steps: int, total_steps: int, peak_lr: float) -> float:
    """Linear warmup to peak_lr, then cosine decay to ~0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} must be < total_steps {total_steps}")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
