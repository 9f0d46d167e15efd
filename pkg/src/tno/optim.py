"""Adam with decoupled weight decay, learning-rate schedules, gradient clipping."""

from __future__ import annotations

import math

import numpy as np



class AdamState:
    """Per-parameter first/second moment buffers plus a shared step counter."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state: AdamState, lr: float):
    """One update over state.params using their .grad slots.

    Weight decay is decoupled: params shrink by lr*wd*param before the
    bias-corrected moment update. Missing grads are treated as zero.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, p in enumerate(state.params):
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {i} (shape {p.shape})")
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype, copy=False)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype, copy=False)
    return norm


class LRSchedule:
    """Learning-rate schedule: cosine annealing or stepwise decay.

    cosine_anneal:  lr0 * (1 + cos(pi * epoch / total)) / 2
    step_decay:     lr0 * gamma ** floor(epoch / every)
    """

    def __init__(self, kind: str, lr0: float, total_steps: int | None = None,
                 gamma: float = 0.9, every: int = 5):
        if kind not in ("cosine_anneal", "step_decay"):
            raise ValueError(f"unknown schedule kind {kind!r}")
        if lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if kind == "cosine_anneal" and (total_steps is None or total_steps < 1):
            raise ValueError("cosine_anneal needs total_steps >= 1")
        self.kind = kind
        self.lr0 = lr0
        self.total_steps = total_steps
        self.gamma = gamma
        self.every = every

    def lr_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        if self.kind == "cosine_anneal":
            frac = min(epoch / self.total_steps, 1.0)
            return self.lr0 * (1.0 + math.cos(math.pi * frac)) / 2.0
        return self.lr0 * self.gamma ** (epoch // self.every)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "lr0": self.lr0}
        if self.kind == "cosine_anneal":
            d["total_steps"] = self.total_steps
        else:
            d["gamma"] = self.gamma
            d["every"] = self.every
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LRSchedule":
        return cls(**d)


def schedule_lr(schedule: LRSchedule, epoch: int) -> float:
    return schedule.lr_at(epoch)
