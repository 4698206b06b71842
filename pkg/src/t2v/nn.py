"""Neural building blocks: convolutions, normalization, attention, embeddings.

Convolutions and normalizations are fused tape ops with hand-written
backward rules (im2col + one GEMM); attention is composed from tensor ops.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Rng
from .tensor import Tensor, TensorError, exact_enabled, make_result, matmul, mm, silu, softmax

GN_EPS = 1e-5


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 1) -> Tensor:
    """2D cross-correlation of ``x`` [N,C,H,W] with ``weight`` [O,C,k,k]."""
    if x.ndim != 4:
        raise TensorError(f"conv2d expects [N,C,H,W], got {x.shape}")
    N, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise TensorError(f"conv2d: input has {C} channels, weight expects {Cw}")
    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Hp, Wp = xd.shape[2], xd.shape[3]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise TensorError("conv2d: kernel larger than padded input")
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    wmat = weight.data.reshape(O, -1)
    dtype = np.result_type(xd, wmat)
    acc = np.float64 if exact_enabled() else dtype
    cols = win.transpose(0, 2, 3, 1, 4, 5).astype(acc, order="C").reshape(N * Ho * Wo, C * kh * kw)
    out = (cols @ wmat.T.astype(acc)).astype(dtype)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (gm.T.astype(cols.dtype) @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = mm(gm, wmat, exact=False).reshape(N, Ho, Wo, C, kh, kw)
            dcols = np.ascontiguousarray(dcols.transpose(0, 3, 4, 5, 1, 2))  # [N,C,kh,kw,Ho,Wo]
            dxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, pad:Hp - pad, pad:Wp - pad] if pad else dxp
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make_result(out, parents, lambda g: bw(g)[: len(parents)])


def conv1d_temporal(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, pad: int = 1) -> Tensor:
    """Convolve ``x`` [B,C,F,H,W] along frames with ``weight`` [O,C,k].

    Every (b, h, w) position is an independent 1D sequence; frames beyond
    the clip are zero padded.
    """
    if x.ndim != 5:
        raise TensorError(f"conv1d_temporal expects [B,C,F,H,W], got {x.shape}")
    B, C, F, H, W = x.shape
    if F < 1:
        raise TensorError("conv1d_temporal needs at least one frame")
    O, Cw, k = weight.shape
    if Cw != C:
        raise TensorError(f"conv1d_temporal: input has {C} channels, weight expects {Cw}")
    xd = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (0, 0), (0, 0))) if pad else x.data
    Fp = xd.shape[2]
    Fo = Fp - k + 1
    win = sliding_window_view(xd, k, axis=2)  # [B,C,Fo,H,W,k]
    wmat = weight.data.reshape(O, -1)
    dtype = np.result_type(xd, wmat)
    acc = np.float64 if exact_enabled() else dtype
    cols = win.transpose(0, 2, 3, 4, 1, 5).astype(acc, order="C").reshape(B * Fo * H * W, C * k)
    out = (cols @ wmat.T.astype(acc)).astype(dtype)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Fo, H, W, O).transpose(0, 4, 1, 2, 3))

    def bw(g):
        gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, O)
        gw = (gm.T.astype(cols.dtype) @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = mm(gm, wmat, exact=False).reshape(B, Fo, H, W, C, k)
            dcols = np.ascontiguousarray(dcols.transpose(0, 5, 4, 1, 2, 3))  # [B,k,C,Fo,H,W]
            dxp = np.zeros((B, C, Fp, H, W), dtype=g.dtype)
            for i in range(k):
                dxp[:, :, i:i + Fo] += dcols[:, i]
            gx = dxp[:, :, pad:Fp - pad] if pad else dxp
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make_result(out, parents, lambda g: bw(g)[: len(parents)])


def _normalize(xd: np.ndarray, axes: tuple, eps: float):
    mean = xd.mean(axis=axes, keepdims=True, dtype=np.float64)
    var = ((xd - mean) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mean) * inv).astype(xd.dtype)
    return xhat, inv.astype(xd.dtype)


def _norm_backward(gh: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes: tuple) -> np.ndarray:
    m1 = gh.mean(axis=axes, keepdims=True)
    m2 = (gh * xhat).mean(axis=axes, keepdims=True)
    return inv * (gh - m1 - xhat * m2)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = GN_EPS) -> Tensor:
    """Group normalization over ``x`` [N,C,...] with per-channel affine."""
    N, C = x.shape[:2]
    if C % groups:
        raise TensorError(f"group_norm: {C} channels not divisible into {groups} groups")
    spatial = x.shape[2:]
    xg = x.data.reshape(N, groups, -1)
    xhat, inv = _normalize(xg, (2,), eps)
    bshape = (1, C) + (1,) * len(spatial)
    gd, bd = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    xhat_full = xhat.reshape(x.shape)
    out = xhat_full * gd + bd
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        ggamma = (g * xhat_full).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = (g * gd).reshape(N, groups, -1)
            gx = _norm_backward(gh, xhat, inv, (2,)).reshape(x.shape)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = GN_EPS) -> Tensor:
    """Normalize over the last axis."""
    xhat, inv = _normalize(x.data, (-1,), eps)
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def bw(g):
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = _norm_backward(g * gamma.data, xhat, inv, (-1,)) if x.requires_grad else None
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored [in, out]."""
    y = matmul(x, weight) if x.ndim >= 2 else matmul(x.reshape(1, -1), weight).reshape(-1)
    return y + bias if bias is not None else y


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise TensorError(f"token id out of range [0, {V})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return make_result(out, (table,), bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of [N,C,H,W]."""
    N, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (N, C, H, 2, W, 2)).reshape(N, C, 2 * H, 2 * W)

    def bw(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), bw)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    if k.shape[-2] == 0:
        raise TensorError("attention over an empty key sequence")
    d = q.shape[-1]
    scores = matmul(q, k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding: first half sin, second half cos.

    ``t`` may be a scalar or 1-D array of integer steps; returns
    ``[dim]`` or ``[len(t), dim]`` float32.
    """
    if dim % 2:
        raise ValueError(f"timestep embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    tt = np.asarray(t, dtype=np.float64)
    args = tt[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(np.float32)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    """Container that registers parameters and submodules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform_init(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(shape, -bound, bound)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        super().__init__()
        self.weight = Parameter(_uniform_init(rng, (d_in, d_out), d_in))
        if bias:
            self.bias = Parameter(_uniform_init(rng, (d_out,), d_in))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng, kernel: int = 3, stride: int = 1):
        super().__init__()
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(_uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = Parameter(_uniform_init(rng, (c_out,), fan_in))
        self.stride = stride
        self.pad = kernel // 2

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class TemporalConv(Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng, kernel: int = 3):
        super().__init__()
        fan_in = c_in * kernel
        self.weight = Parameter(_uniform_init(rng, (c_out, c_in, kernel), fan_in))
        self.bias = Parameter(_uniform_init(rng, (c_out,), fan_in))
        self.pad = kernel // 2

    def forward(self, x: Tensor) -> Tensor:
        return conv1d_temporal(x, self.weight, self.bias, pad=self.pad)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: Optional[int] = None):
        super().__init__()
        self.groups = groups or min(32, channels)
        if channels % self.groups:
            raise ValueError(f"{channels} channels not divisible by {self.groups} groups")
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: Rng, scale: float = 0.02):
        super().__init__()
        self.weight = Parameter(rng.normal((num, dim)) * scale)

    def forward(self, ids) -> Tensor:
        return embedding(ids, self.weight)


class MultiHeadAttention(Module):
    """Multi-head attention; keys/values come from ``context`` when given.

    Inputs are [..., L, dim]; context is [..., L_ctx, context_dim]. Leading
    axes broadcast, so one context can serve many query groups.
    """

    def __init__(self, dim: int, heads: int, rng: Rng, context_dim: Optional[int] = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        kv_dim = context_dim or dim
        self.to_q = Linear(dim, dim, rng, bias=False)
        self.to_k = Linear(kv_dim, dim, rng, bias=False)
        self.to_v = Linear(kv_dim, dim, rng, bias=False)
        self.to_out = Linear(dim, dim, rng)

    def _split(self, t: Tensor) -> Tensor:
        lead = t.shape[:-2]
        L = t.shape[-2]
        t = t.reshape(lead + (L, self.heads, self.head_dim))
        n = len(lead)
        return t.transpose(tuple(range(n)) + (n + 1, n, n + 2))

    def forward(self, x: Tensor, context: Optional[Tensor] = None) -> Tensor:
        src = x if context is None else context
        if x.shape[-2] == 0 or src.shape[-2] == 0:
            raise TensorError("attention over a length-0 sequence")
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(src))
        v = self._split(self.to_v(src))
        o = scaled_dot_product_attention(q, k, v)
        n = o.ndim - 3
        o = o.transpose(tuple(range(n)) + (n + 1, n, n + 2))
        o = o.reshape(o.shape[:-2] + (self.heads * self.head_dim,))
        return self.to_out(o)


def zero_(module: Module) -> None:
    """Zero every parameter of ``module`` in place."""
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


__all__ = [
    "conv2d", "conv1d_temporal", "group_norm", "layer_norm", "linear", "embedding",
    "upsample_nearest2x", "scaled_dot_product_attention", "timestep_embedding",
    "Parameter", "Module", "Linear", "Conv2d", "TemporalConv", "GroupNorm", "LayerNorm",
    "Embedding", "MultiHeadAttention", "zero_", "silu",
]
