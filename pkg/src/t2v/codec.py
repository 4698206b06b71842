"""Frame-wise latent codec: [F,H,W,3] pixels <-> [F,4,H/8,W/8] latents.

``ConvCodec`` is a small strided-conv autoencoder trained once on synthetic
frames and then frozen. ``IdentityCodec`` is an exact, parameter-free
stand-in for testing the diffusion stack without reconstruction error.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import make_batch
from .nn import Conv2d, Module, Parameter, upsample_nearest2x
from .optim import AdamW
from .rng import Rng
from .tensor import Tensor, backward, fast_matmul, no_grad, silu

log = logging.getLogger(__name__)

FACTOR = 8
LATENT_CHANNELS = 4


def check_clip(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float32)
    if v.ndim != 4 or v.shape[-1] != 3:
        raise ValueError(f"expected a clip [F,H,W,3], got {v.shape}")
    F, H, W, _ = v.shape
    if F < 1:
        raise ValueError("clip has no frames")
    if H % FACTOR or W % FACTOR:
        raise ValueError(f"frame size {H}x{W} not divisible by {FACTOR}")
    return v


def check_latent(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 4 or z.shape[1] != LATENT_CHANNELS:
        raise ValueError(f"expected latents [F,{LATENT_CHANNELS},h,w], got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("latent contains non-finite values")
    return z


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


class IdentityCodec:
    """Exact codec for 8x8-block-constant frames.

    Each 8x8 block is averaged into channels 0-2; channel 3 is zero. Decoding
    repeats the block colour, so decode(encode(v)) == v for block-constant v.
    """

    frozen = True

    def encode(self, v: np.ndarray) -> np.ndarray:
        v = check_clip(v)
        F, H, W, _ = v.shape
        blocks = v.astype(np.float64).reshape(F, H // FACTOR, FACTOR, W // FACTOR, FACTOR, 3).mean(axis=(2, 4))
        z = np.zeros((F, LATENT_CHANNELS, H // FACTOR, W // FACTOR), dtype=np.float32)
        z[:, :3] = blocks.transpose(0, 3, 1, 2)
        return z

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = check_latent(z)
        rgb = z[:, :3].transpose(0, 2, 3, 1)
        rgb = np.repeat(np.repeat(rgb, FACTOR, axis=1), FACTOR, axis=2)
        return np.clip(rgb, 0.0, 1.0).astype(np.float32)

    def fingerprint(self) -> str:
        return "identity"


@dataclass
class CodecConfig:
    channels: int = 32
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 7
    height: int = 32
    width: int = 32
    holdout: int = 64


class ConvCodec(Module):
    """Three stride-2 stages down to 4 channels and a mirrored nearest-upsampling decoder."""

    def __init__(self, channels: int, rng: Rng):
        super().__init__()
        c1, c2 = channels, 2 * channels
        self.encoder = Module()
        e = self.encoder
        e.conv_in = Conv2d(3, c1, rng.split(0))
        e.down1 = Conv2d(c1, c1, rng.split(1), stride=2)
        e.mid1 = Conv2d(c1, c1, rng.split(2))
        e.down2 = Conv2d(c1, c2, rng.split(3), stride=2)
        e.down3 = Conv2d(c2, c2, rng.split(4), stride=2)
        e.mid3 = Conv2d(c2, c2, rng.split(5))
        e.conv_out = Conv2d(c2, LATENT_CHANNELS, rng.split(6))
        self.decoder = Module()
        d = self.decoder
        d.conv_in = Conv2d(LATENT_CHANNELS, c2, rng.split(10))
        d.mid3 = Conv2d(c2, c2, rng.split(11))
        d.up3 = Conv2d(c2, c2, rng.split(12))
        d.up2 = Conv2d(c2, c1, rng.split(13))
        d.mid2 = Conv2d(c1, c1, rng.split(14))
        d.up1 = Conv2d(c1, c1, rng.split(15))
        d.conv_out = Conv2d(c1, 3, rng.split(16))
        # per-channel latent normalisation, fitted after training
        self.latent_mean = Parameter(np.zeros(LATENT_CHANNELS))
        self.latent_std = Parameter(np.ones(LATENT_CHANNELS))
        self.latent_mean.requires_grad = False
        self.latent_std.requires_grad = False
        self.frozen = False

    def encode_tensor(self, x: Tensor) -> Tensor:
        """[N,3,H,W] in [0,1] -> raw (unnormalised) latents [N,4,H/8,W/8]."""
        e = self.encoder
        h = silu(e.conv_in(x * 2.0 - 1.0))
        h = silu(e.down1(h))
        h = silu(e.mid1(h)) + h
        h = silu(e.down2(h))
        h = silu(e.down3(h))
        h = silu(e.mid3(h)) + h
        return e.conv_out(h)

    def decode_tensor(self, z: Tensor) -> Tensor:
        d = self.decoder
        h = silu(d.conv_in(z))
        h = silu(d.mid3(h)) + h
        h = silu(d.up3(upsample_nearest2x(h)))
        h = silu(d.up2(upsample_nearest2x(h)))
        h = silu(d.mid2(h)) + h
        h = silu(d.up1(upsample_nearest2x(h)))
        return d.conv_out(h) * 0.5 + 0.5

    def encode(self, v: np.ndarray) -> np.ndarray:
        """Encode each frame of ``v`` [F,H,W,3] independently; returns normalised latents."""
        v = check_clip(v)
        with no_grad():
            z = self.encode_tensor(Tensor(v.transpose(0, 3, 1, 2))).data
        mean = self.latent_mean.data.reshape(1, -1, 1, 1)
        std = self.latent_std.data.reshape(1, -1, 1, 1)
        return ((z - mean) / std).astype(np.float32)

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Decode latents [F,4,h,w] frame by frame to a clip [F,8h,8w,3] clamped to [0,1]."""
        z = check_latent(z)
        raw = z * self.latent_std.data.reshape(1, -1, 1, 1) + self.latent_mean.data.reshape(1, -1, 1, 1)
        with no_grad():
            x = self.decode_tensor(Tensor(raw.astype(np.float32))).data
        return np.clip(x.transpose(0, 2, 3, 1), 0.0, 1.0).astype(np.float32)

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters():
            p.requires_grad = False

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def _frames(rng: Rng, count: int, height: int, width: int) -> np.ndarray:
    clips, _ = make_batch(rng, count, 1, height, width)
    return clips[:, 0]


def heldout_frames(cfg: CodecConfig) -> np.ndarray:
    return _frames(Rng(cfg.seed).split(10**6), cfg.holdout, cfg.height, cfg.width)


def reconstruction_psnr(codec, frames: np.ndarray) -> float:
    return psnr(codec.decode(codec.encode(frames)), frames)


def train_codec(cfg: CodecConfig, log_every: int = 200) -> tuple[ConvCodec, dict]:
    """Fit a ConvCodec with an L2 reconstruction loss, fit latent statistics, freeze it.

    Returns the frozen codec and a report with the baseline (untrained) and
    final held-out PSNR.
    """
    rng = Rng(cfg.seed)
    codec = ConvCodec(cfg.channels, rng.split(0))
    holdout = heldout_frames(cfg)
    report = {"psnr_init": reconstruction_psnr(codec, holdout)}
    opt = AdamW(codec.named_parameters(), lr=cfg.lr, weight_decay=0.0, grad_clip=1.0)
    opt.params = {n: p for n, p in opt.params.items() if p.requires_grad}
    data_rng = rng.split(1)
    for step in range(cfg.steps):
        # cosine decay keeps late steps from bouncing around the optimum
        opt.lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, cfg.steps)))
        x = _frames(data_rng.split(step), cfg.batch_size, cfg.height, cfg.width).transpose(0, 3, 1, 2)
        xt = Tensor(np.ascontiguousarray(x))
        with fast_matmul():
            err = codec.decode_tensor(codec.encode_tensor(xt)) - xt
            loss = (err * err).mean()
            opt.zero_grad()
            backward(loss)
        opt.step()
        if log_every and (step + 1) % log_every == 0:
            log.info("codec step %d loss %.5f", step + 1, loss.item())
    fit = _frames(rng.split(2), 256, cfg.height, cfg.width)
    with no_grad():
        raw = codec.encode_tensor(Tensor(fit.transpose(0, 3, 1, 2))).data
    codec.latent_mean.data = raw.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    codec.latent_std.data = np.maximum(raw.std(axis=(0, 2, 3), dtype=np.float64), 1e-3).astype(np.float32)
    codec.freeze()
    report["psnr_final"] = reconstruction_psnr(codec, holdout)
    report["steps"] = cfg.steps
    return codec, report
