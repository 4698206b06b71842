"""AdamW with decoupled weight decay and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One in-place AdamW update.

    p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps), with bias-corrected moments.
    Parameters whose gradient is missing are left untouched.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            p -= (lr * weight_decay) * p
        p -= lr * update


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


class AdamW:
    """Convenience wrapper binding :func:`adamw_step` to a module's parameters."""

    def __init__(self, named_params: Sequence, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, grad_clip: float = 0.0):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.state = OptimizerState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        norm = clip_grad_norm(grads, self.grad_clip) if self.grad_clip else float("nan")
        adamw_step({n: p.data for n, p in self.params.items()}, grads, self.state,
                   self.lr, self.betas, self.eps, self.weight_decay)
        return norm
