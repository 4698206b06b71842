"""Noise schedules, the forward process, the epsilon-prediction loss and DDIM sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .rng import Rng
from .tensor import Tensor, as_tensor, no_grad, where

P_UNCOND = 0.1
DEFAULT_GUIDANCE = 9.0


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)


def make_schedule(T: int, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.05) -> NoiseSchedule:
    """Build beta/alpha/alpha_bar arrays (float64) for ``T`` steps.

    ``scaled_linear`` interpolates linearly in sqrt(beta) and squares.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        beta = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar)


def _coef(values: np.ndarray, t, ndim: int, dtype) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    c = values[t].astype(dtype)
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


def q_sample(z0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal sqrt(ab_t) z0 + sqrt(1-ab_t) eps.

    ``t`` is a scalar or one step per leading item of ``z0``.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    t_arr = np.asarray(t)
    if t_arr.size and (t_arr.min() < 0 or t_arr.max() >= sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T})")
    dtype = np.result_type(z0, eps)
    ab = _coef(sched.alpha_bar, t, z0.ndim, np.float64)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(dtype)


def training_loss(z0: np.ndarray, context: Tensor, model: Callable, sched: NoiseSchedule, rng: Rng,
                  null_context: Optional[Tensor] = None, p_uncond: float = P_UNCOND) -> Tensor:
    """Epsilon-prediction MSE for latents ``z0`` [B,F,4,h,w].

    Each item draws its own t and noise. With probability ``p_uncond`` an
    item's text embedding is replaced by ``null_context`` so the same model
    also learns the unconditional branch.
    """
    z0 = np.asarray(z0, dtype=np.float32)
    B = z0.shape[0]
    t = rng.split(0).integers(0, sched.T, (B,))
    eps = rng.split(1).normal(z0.shape, dtype=np.float32)
    context = as_tensor(context)
    if null_context is not None and p_uncond > 0:
        drop = rng.split(2).bernoulli(p_uncond, (B,))
        if drop.any():
            mask = drop.reshape((B,) + (1,) * (context.ndim - 1))
            null = as_tensor(null_context)
            null = null.reshape((1,) + null.shape) if null.ndim == context.ndim - 1 else null
            context = where(mask, null, context)
    zt = q_sample(z0, t, eps, sched)
    pred = model(Tensor(zt), context, t)
    err = pred - eps
    return (err * err).mean()


def cfg_combine(eps_cond, eps_uncond, s: float):
    """Classifier-free guidance: eps_u + s (eps_c - eps_u), exact at s = 0 and s = 1."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    if s == 1:
        return eps_cond.copy()
    if s == 0:
        return eps_uncond.copy()
    return eps_uncond + s * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    guidance_scale: float = DEFAULT_GUIDANCE
    eta: float = 0.0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")


def ddim_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Uniform-stride descending subset of [0, T); always ends at 0."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    return (np.arange(num_steps, dtype=np.int64) * T // num_steps)[::-1].copy()


def ddim_step(zt: np.ndarray, eps_hat: np.ndarray, ab_t: float, ab_prev: float, eta: float = 0.0,
              noise: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """One DDIM update from alpha_bar ``ab_t`` to ``ab_prev``; returns (z_prev, predicted z0).

    sigma = eta * sqrt((1-ab_prev)/(1-ab_t)) * sqrt(1 - ab_t/ab_prev).
    """
    zt = np.asarray(zt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    x0 = (zt - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    sigma = ddim_sigma(ab_t, ab_prev, eta)
    direction = np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    z_prev = np.sqrt(ab_prev) * x0 + direction
    if sigma > 0:
        if noise is None:
            raise ValueError("eta > 0 needs a noise sample")
        z_prev = z_prev + sigma * np.asarray(noise, dtype=np.float64)
    return z_prev, x0


def ddim_sigma(ab_t: float, ab_prev: float, eta: float) -> float:
    if eta == 0:
        return 0.0
    return float(eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev))


def ddim_sample(model: Callable, context, shape, sampler: SamplerConfig, sched: NoiseSchedule, rng: Rng,
                null_context=None, batch: int = 1) -> np.ndarray:
    """Sample latents of ``shape`` [F,4,h,w] (or [B,F,4,h,w] with ``batch``).

    ``model(z [B,F,4,h,w], context [B,N_p,N_c], t [B])`` predicts noise. Given
    ``null_context``, the conditional and null branches are evaluated in one
    stacked call and mixed with :func:`cfg_combine`; without it only the
    conditional branch runs, which requires guidance 1.
    """
    steps = ddim_timesteps(sched.T, sampler.num_steps)
    shape = tuple(shape)
    full = (batch,) + shape if len(shape) == 4 else shape
    B = full[0]
    cond = np.asarray(context.data if isinstance(context, Tensor) else context, dtype=np.float32)
    if cond.ndim == 2:
        cond = np.broadcast_to(cond, (B,) + cond.shape)
    s = sampler.guidance_scale
    guided = null_context is not None
    if guided:
        null = np.asarray(null_context.data if isinstance(null_context, Tensor) else null_context, np.float32)
        null = np.broadcast_to(null, cond.shape)
        ctx = np.concatenate([cond, null], axis=0)
    elif s != 1:
        raise ValueError("guidance other than 1 needs a null context")
    else:
        ctx = np.ascontiguousarray(cond)
    z = rng.split(0).normal(full, dtype=np.float64)
    noise_rng = rng.split(1)
    with no_grad():
        for i, t in enumerate(steps):
            ab_t = float(sched.alpha_bar[t])
            ab_prev = float(sched.alpha_bar[steps[i + 1]]) if i + 1 < len(steps) else 1.0
            zin = z.astype(np.float32)
            if guided:
                out = np.asarray(_eval(model, np.concatenate([zin, zin]), ctx, np.full(2 * B, t)))
                eps_hat = cfg_combine(out[:B], out[B:], s)
            else:
                eps_hat = np.asarray(_eval(model, zin, ctx, np.full(B, t)))
            noise = noise_rng.split(i).normal(full, dtype=np.float64) if sampler.eta > 0 else None
            z, _ = ddim_step(z, eps_hat, ab_t, ab_prev, sampler.eta, noise)
    z = z.astype(np.float32)
    return z if len(shape) == 5 else (z[0] if batch == 1 else z)


def _eval(model, z, ctx, t):
    out = model(Tensor(z), Tensor(ctx), t)
    return out.data if isinstance(out, Tensor) else out
