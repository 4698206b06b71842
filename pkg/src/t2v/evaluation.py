"""Desk-scale probes: structural invariants, conditioning contrast, temporal smoothness."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import decode_checkpoint, encode_checkpoint
from .data import make_batch
from .diffusion import cfg_combine, q_sample
from .pipeline import generate
from .rng import Rng
from .tensor import Tensor, no_grad
from .training import build_components, encode_clips, to_checkpoint, make_optimizer, train_config_from
from .text import tokenize_batch

SUITES = ("invariants", "conditioning", "smoothness")

# Held-out data comes from a stream no training step uses.
HELDOUT_STREAM = 7_000_003

SMOOTHNESS_PROMPTS = (
    "a red square moving right",
    "a blue circle moving up",
    "a green triangle moving left",
    "a yellow square moving down",
)


@dataclass
class Report:
    suite: str
    metrics: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)  # name -> bool

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def rows(self) -> list[tuple[str, str]]:
        out = [(k, _fmt(v)) for k, v in self.metrics.items()]
        out += [(f"check.{k}", "pass" if v else "FAIL") for k, v in self.checks.items()]
        return out


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def params_hash(*modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, p in m.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
    return h.hexdigest()


def invariants(comp) -> Report:
    """Checks on a freshly initialised model built from the checkpoint's config."""
    fresh = build_components(comp.config, codec=comp.codec)
    cfg = comp.config
    h, w = cfg["data.height"] // 8, cfg["data.width"] // 8
    rng = Rng(cfg["run.seed"]).split(HELDOUT_STREAM)
    rep = Report("invariants")
    with no_grad():
        ctx = fresh.text.encode(["a red square moving right"]).data
        frame = rng.split(0).normal((1, 1, 4, h, w))
        out = fresh.unet(Tensor(np.repeat(frame, 4, axis=1)), Tensor(ctx), [10]).data
        dev = float(np.abs(out - out[:, :1]).max())
        clip = rng.split(1).normal((1, 4, 4, h, w))
        joint = fresh.unet(Tensor(clip), Tensor(ctx), [10]).data
        single = np.concatenate([fresh.unet(Tensor(clip[:, i:i + 1]), Tensor(ctx), [10]).data for i in range(4)], 1)
        split_dev = float(np.abs(joint - single).max())
    rep.metrics["identical_frames_max_dev"] = dev
    rep.metrics["frame_split_max_dev"] = split_dev
    rep.checks["identical_frames"] = dev < 1e-6
    rep.checks["frame_independence"] = split_dev < 1e-6

    ab = comp.sched.alpha_bar
    rep.checks["alpha_bar_decreasing"] = bool(np.all(np.diff(ab) < 0) and ab[0] <= 1 and ab[-1] > 0)
    e_c, e_u = rng.split(2).normal((2, 8))
    rep.checks["cfg_identities"] = bool(np.array_equal(cfg_combine(e_c, e_u, 1.0), e_c)
                                        and np.array_equal(cfg_combine(e_c, e_u, 0.0), e_u))
    rep.checks["codec_frozen"] = bool(getattr(comp.codec, "frozen", False))

    ck = to_checkpoint(fresh, make_optimizer(fresh, train_config_from(cfg)), 0)
    blob = encode_checkpoint(ck)
    rep.checks["checkpoint_round_trip"] = encode_checkpoint(decode_checkpoint(blob)) == blob

    before = params_hash(comp.unet, comp.text)
    generate(comp, "a red square moving right", seed=0, frames=2, steps=2, guidance=3.0)
    rep.checks["sampling_leaves_params"] = params_hash(comp.unet, comp.text) == before
    return rep


def heldout_batch(comp, count: int):
    cfg = comp.config
    rng = Rng(cfg["run.seed"]).split(HELDOUT_STREAM).split(10)
    return make_batch(rng, count, cfg["data.frames"], cfg["data.height"], cfg["data.width"])


def conditioning(comp, clips: int = 32, draws_per_clip: int = 8, chunk: int = 8) -> Report:
    """Held-out epsilon loss with true captions vs captions permuted across clips.

    Both arms share the clip, timestep and noise of every draw, so the only
    difference is the text.
    """
    video, captions = heldout_batch(comp, clips)
    z0 = encode_clips(comp.codec, video)
    rng = Rng(comp.config["run.seed"]).split(HELDOUT_STREAM).split(11)
    perm = _derangement(rng.split(0), clips)
    shuffled = [captions[i] for i in perm]
    T = comp.sched.T
    true_l, shuf_l = [], []
    with no_grad():
        ids_true = tokenize_batch(captions, comp.text.vocab, comp.text.cfg.max_len)
        ids_shuf = tokenize_batch(shuffled, comp.text.vocab, comp.text.cfg.max_len)
        c_true = comp.text(ids_true).data
        c_shuf = comp.text(ids_shuf).data
        for d in range(draws_per_clip):
            drng = rng.split(1 + d)
            t = drng.split(0).integers(0, T, (clips,))
            eps = drng.split(1).normal(z0.shape)
            zt = q_sample(z0, t, eps, comp.sched)
            for s in range(0, clips, chunk):
                sl = slice(s, s + chunk)
                for ctx, acc in ((c_true, true_l), (c_shuf, shuf_l)):
                    pred = comp.unet(Tensor(zt[sl]), Tensor(ctx[sl]), t[sl]).data
                    acc.extend(((pred - eps[sl]) ** 2).reshape(pred.shape[0], -1).mean(axis=1).tolist())
    rep = Report("conditioning")
    rep.metrics["draws"] = len(true_l)
    rep.metrics["loss_true_captions"] = float(np.mean(true_l))
    rep.metrics["loss_shuffled_captions"] = float(np.mean(shuf_l))
    rep.checks["true_beats_shuffled"] = rep.metrics["loss_true_captions"] < rep.metrics["loss_shuffled_captions"]
    return rep


def _derangement(rng: Rng, n: int) -> np.ndarray:
    """A permutation with no fixed points (n >= 2)."""
    for k in range(1000):
        p = rng.split(k).permutation(n)
        if n < 2 or not np.any(p == np.arange(n)):
            return p
    raise RuntimeError("could not draw a derangement")


def inter_frame_mse(clip: np.ndarray) -> float:
    clip = np.asarray(clip, dtype=np.float64)
    if len(clip) < 2:
        raise ValueError("need at least two frames")
    return float(np.mean((clip[1:] - clip[:-1]) ** 2))


def smoothness(comp, steps: int = 50, guidance: float = 9.0, seeds: int = 2, shuffles: int = 8,
               prompts=SMOOTHNESS_PROMPTS) -> tuple[Report, list]:
    """Consecutive-frame MSE of sampled clips vs the same clips with frames shuffled."""
    frames = comp.config["data.frames"]
    rng = Rng(comp.config["run.seed"]).split(HELDOUT_STREAM).split(12)
    sampled, shuffled = [], []
    clips = []
    for p_i, prompt in enumerate(prompts):
        for s in range(seeds):
            clip = generate(comp, prompt, seed=1000 * p_i + s, frames=frames, steps=steps, guidance=guidance)
            clips.append((prompt, clip))
            sampled.append(inter_frame_mse(clip))
            for k in range(shuffles):
                perm = rng.split(len(clips)).split(k).permutation(frames)
                shuffled.append(inter_frame_mse(clip[perm]))
    rep = Report("smoothness")
    rep.metrics["clips"] = len(clips)
    rep.metrics["inter_frame_mse_sampled"] = float(np.mean(sampled))
    rep.metrics["inter_frame_mse_shuffled"] = float(np.mean(shuffled))
    rep.checks["smoother_than_shuffled"] = rep.metrics["inter_frame_mse_sampled"] < rep.metrics["inter_frame_mse_shuffled"]
    return rep, clips


def prompt_contrast(comp, a: str, b: str, seed: int = 0, steps: int = 50, guidance: float = 9.0) -> float:
    """Mean absolute pixel difference between clips sampled for two prompts with one seed."""
    frames = comp.config["data.frames"]
    ca = generate(comp, a, seed, frames, steps, guidance)
    cb = generate(comp, b, seed, frames, steps, guidance)
    return float(np.mean(np.abs(ca.astype(np.float64) - cb)))
