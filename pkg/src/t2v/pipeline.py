"""Text-to-video inference: prompt -> text embedding -> DDIM in latent space -> decoded frames."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .codec import FACTOR, LATENT_CHANNELS
from .diffusion import SamplerConfig, ddim_sample
from .rng import Rng
from .tensor import no_grad


def generate(comp, prompt: str, seed: int, frames: int, steps: int = 50, guidance: float = 9.0,
             eta: float = 0.0) -> np.ndarray:
    """Sample a clip [F,H,W,3] in [0,1] for ``prompt``; deterministic given ``seed``."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    cfg = comp.config
    h, w = cfg["data.height"] // FACTOR, cfg["data.width"] // FACTOR
    with no_grad():
        cond = comp.text.encode(prompt).data
    null = comp.text.null_embedding().data
    sampler = SamplerConfig(num_steps=steps, guidance_scale=guidance, eta=eta)
    z = ddim_sample(comp.unet, cond, (frames, LATENT_CHANNELS, h, w), sampler, comp.sched, Rng(seed), null_context=null)
    return comp.codec.decode(z)


def to_bytes(frame: np.ndarray) -> np.ndarray:
    """[0,1] floats -> uint8 with round-half-up."""
    v = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def ppm_bytes(frame: np.ndarray) -> bytes:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ValueError(f"expected a frame [H,W,3], got {frame.shape}")
    H, W, _ = frame.shape
    return f"P6\n{W} {H}\n255\n".encode("ascii") + to_bytes(frame).tobytes()


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError(f"{path}: not a P6 file with maxval 255")
    W, H = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W, 3)


def export_frames(clip: np.ndarray, directory, fmt: str = "ppm") -> list[Path]:
    """Write frame_000.ppm ... for a clip [F,H,W,3]; returns the paths in order."""
    if fmt != "ppm":
        raise ValueError(f"unsupported frame format {fmt!r}")
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise ValueError(f"expected a clip [F,H,W,3], got {clip.shape}")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(clip):
        p = d / f"frame_{i:03d}.ppm"
        p.write_bytes(ppm_bytes(frame))
        paths.append(p)
    return paths
