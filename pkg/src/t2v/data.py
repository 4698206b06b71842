"""Synthetic captioned videos: one anti-aliased shape translating over a dark background."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng

SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (0.92, 0.16, 0.14),
    "green": (0.18, 0.85, 0.22),
    "blue": (0.20, 0.32, 0.95),
    "yellow": (0.95, 0.88, 0.15),
}
DIRECTIONS = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "up": (0.0, -1.0), "down": (0.0, 1.0)}
BACKGROUND = 0.06
SUPERSAMPLE = 8


@dataclass(frozen=True)
class ClipSpec:
    shape: str
    color: str
    direction: str
    speed: float = 2.0
    frames: int = 8
    height: int = 32
    width: int = 32
    seed: int = 0
    size: float = 5.0  # half-extent in pixels

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.shape} moving {self.direction}"


def _coverage(shape: str, px: np.ndarray, py: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = px - cx, py - cy
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    # upward-pointing triangle inscribed in the circle of radius r, centroid at (cx, cy)
    top = -r
    base = 0.5 * r
    half_w = r * np.sqrt(3.0) / 2.0
    t = (dy - top) / (base - top)
    return (dy >= top) & (dy <= base) & (np.abs(dx) <= t * half_w)


def _start_position(spec: ClipSpec, rng: Rng) -> tuple[float, float]:
    ux, uy = DIRECTIONS[spec.direction]
    travel = spec.speed * (spec.frames - 1)
    lo_x, hi_x = spec.size + 0.5, spec.width - spec.size - 0.5
    lo_y, hi_y = spec.size + 0.5, spec.height - spec.size - 0.5

    def pick(lo, hi, u):
        # leave room for the whole trajectory along the motion axis
        if u > 0:
            hi = max(lo, hi - travel)
        elif u < 0:
            lo = min(hi, lo + travel)
        return float(rng.uniform((), lo, hi, dtype=np.float64))

    return pick(lo_x, hi_x, ux), pick(lo_y, hi_y, uy)


def generate_clip(spec: ClipSpec) -> tuple[np.ndarray, str]:
    """Render ``spec`` as a [F,H,W,3] float32 clip in [0,1] plus its caption."""
    if spec.shape not in SHAPES or spec.color not in COLORS or spec.direction not in DIRECTIONS:
        raise ValueError(f"unknown attribute in {spec}")
    if 2 * spec.size + 1 > min(spec.height, spec.width):
        raise ValueError(f"shape of half-size {spec.size} does not fit a {spec.height}x{spec.width} frame")
    if spec.frames < 1:
        raise ValueError("a clip needs at least one frame")
    rng = Rng(spec.seed)
    x0, y0 = _start_position(spec, rng)
    ux, uy = DIRECTIONS[spec.direction]

    s = SUPERSAMPLE
    offs = (np.arange(s) + 0.5) / s
    py = (np.arange(spec.height)[:, None] + offs[None, :]).reshape(-1)
    px = (np.arange(spec.width)[:, None] + offs[None, :]).reshape(-1)
    PY, PX = np.meshgrid(py, px, indexing="ij")

    color = np.asarray(COLORS[spec.color], dtype=np.float64)
    frames = np.empty((spec.frames, spec.height, spec.width, 3), dtype=np.float32)
    for f in range(spec.frames):
        cx = np.clip(x0 + ux * spec.speed * f, spec.size + 0.5, spec.width - spec.size - 0.5)
        cy = np.clip(y0 + uy * spec.speed * f, spec.size + 0.5, spec.height - spec.size - 0.5)
        mask = _coverage(spec.shape, PX, PY, cx, cy, spec.size)
        cov = mask.reshape(spec.height, s, spec.width, s).mean(axis=(1, 3))
        frames[f] = (BACKGROUND + cov[..., None] * (color - BACKGROUND)).astype(np.float32)
    return frames, spec.caption


def random_spec(rng: Rng, frames: int, height: int = 32, width: int = 32) -> ClipSpec:
    return ClipSpec(
        shape=rng.choice(SHAPES),
        color=rng.choice(tuple(COLORS)),
        direction=rng.choice(tuple(DIRECTIONS)),
        speed=float(rng.uniform((), 1.0, 2.0, dtype=np.float64)),
        frames=frames,
        height=height,
        width=width,
        seed=int(rng.integers(0, 2**62)),
    )


def make_batch(rng: Rng, count: int, frames: int, height: int = 32, width: int = 32):
    """``count`` random clips stacked as [B,F,H,W,3] plus captions."""
    clips, captions = [], []
    for _ in range(count):
        clip, cap = generate_clip(random_spec(rng, frames, height, width))
        clips.append(clip)
        captions.append(cap)
    return np.stack(clips), captions


def centroid(frame: np.ndarray) -> tuple[float, float]:
    """Centre of the foreground mass of an [H,W,3] frame (x, y), pixel-centre units."""
    mass = np.clip(frame.mean(axis=-1) - BACKGROUND, 0.0, None).astype(np.float64)
    total = mass.sum()
    ys, xs = np.mgrid[: frame.shape[0], : frame.shape[1]] + 0.5
    return float((mass * xs).sum() / total), float((mass * ys).sum() / total)
