"""Multi-frame training: image/video step interleaving, the optimisation loop, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, merge, save_checkpoint
from .codec import CodecConfig, ConvCodec, IdentityCodec, train_codec
from .config import Config
from .data import make_batch
from .diffusion import NoiseSchedule, make_schedule, training_loss
from .optim import AdamW
from .rng import Rng
from .tensor import Tensor, backward
from .text import TextConfig, TextEncoder, Vocabulary, tokenize_batch
from .unet import STBlockConfig, UNet, UNetConfig, build_unet

log = logging.getLogger(__name__)

IMAGE, VIDEO = "image", "video"

# Full-scale settings, kept for reference only.
FULL_SCALE_BATCH_IMAGE = 1400
FULL_SCALE_BATCH_VIDEO = 3200
FULL_SCALE_LR = 5e-5
FULL_SCALE_FRAMES = 16


class TrainingAborted(RuntimeError):
    """Non-finite loss; carries what is needed to replay the failing step."""

    def __init__(self, step: int, rng_state: tuple, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (rng state {rng_state})")
        self.step = step
        self.rng_state = rng_state
        self.loss = loss


@dataclass
class TrainConfig:
    image_fraction: Fraction = Fraction(1, 8)
    batch_size_image: int = 8
    batch_size_video: int = 4
    frames: int = 8
    height: int = 32
    width: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    p_uncond: float = 0.1
    total_steps: int = 2000
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 500

    def __post_init__(self):
        self.image_fraction = Fraction(self.image_fraction).limit_denominator(10**6)
        if not 0 <= self.image_fraction <= 1:
            raise ValueError("image_fraction must lie in [0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if min(self.batch_size_image, self.batch_size_video, self.frames) < 1:
            raise ValueError("batch sizes and frame count must be >= 1")


def batch_scheduler(step: int, cfg: TrainConfig | Fraction) -> str:
    """Deterministic interleaving: step k is an image step iff ceil((k+1)f) > ceil(kf).

    For f = 1/8 this is exactly ``k % 8 == 0``; any window of 1/f steps holds
    one image step.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    f = Fraction(cfg.image_fraction if isinstance(cfg, TrainConfig) else cfg)
    return IMAGE if math.ceil((step + 1) * f) > math.ceil(step * f) else VIDEO


@dataclass
class Components:
    unet: UNet
    text: TextEncoder
    codec: object
    sched: NoiseSchedule
    config: Config
    freeze_text: bool = False

    def trainable(self) -> list:
        named = [(f"unet.{n}", p) for n, p in self.unet.named_parameters()]
        if not self.freeze_text:
            named += [(f"text.{n}", p) for n, p in self.text.named_parameters()]
        return named


def train_config_from(config: Config) -> TrainConfig:
    t = config.section("train")
    return TrainConfig(
        image_fraction=t["image_fraction"], batch_size_image=t["batch_size_image"],
        batch_size_video=t["batch_size_video"], frames=config["data.frames"],
        height=config["data.height"], width=config["data.width"], lr=t["lr"],
        weight_decay=t["weight_decay"], grad_clip=t["grad_clip"], p_uncond=config["diffusion.p_uncond"],
        total_steps=t["total_steps"], seed=config["run.seed"], log_every=t["log_every"],
        checkpoint_every=t["checkpoint_every"],
    )


def unet_configs(config: Config) -> tuple[UNetConfig, STBlockConfig]:
    u = config.section("unet")
    ucfg = UNetConfig(base_channels=u["base_channels"], channel_mult=u["channel_mult"],
                      time_embed_dim=u["time_embed_dim"], context_dim=config["text.dim"],
                      num_timesteps=config["diffusion.timesteps"], groups=u["groups"])
    scfg = STBlockConfig(n_spatial_conv=u["n_spatial_conv"], n_temporal_conv=u["n_temporal_conv"],
                         n_spatial_attn=u["n_spatial_attn"], n_temporal_attn=u["n_temporal_attn"],
                         heads=u["heads"], temporal_pos_embed=u["temporal_pos_embed"])
    return ucfg, scfg


def text_config(config: Config) -> TextConfig:
    t = config.section("text")
    return TextConfig(max_len=t["max_len"], dim=t["dim"], layers=t["layers"], heads=t["heads"], freeze=t["freeze"])


def schedule_from(config: Config) -> NoiseSchedule:
    d = config.section("diffusion")
    return make_schedule(d["timesteps"], d["schedule"], d["beta_start"], d["beta_end"])


def codec_config(config: Config) -> CodecConfig:
    c = config.section("codec")
    return CodecConfig(channels=c["channels"], steps=c["steps"], batch_size=c["batch_size"], lr=c["lr"],
                       seed=c["seed"], height=config["data.height"], width=config["data.width"])


def _codec_key(cfg: CodecConfig) -> str:
    return ",".join(f"{k}={v}" for k, v in sorted(vars(cfg).items()))


def obtain_codec(config: Config, report: Optional[dict] = None):
    """Build the frozen codec, training it unless a matching cached copy exists."""
    if config["codec.kind"] == "identity":
        return IdentityCodec()
    ccfg = codec_config(config)
    cache = config["codec.cache"]
    if cache and Path(cache).exists():
        ck = load_checkpoint(cache)
        if ck.config.get("codec.key") == _codec_key(ccfg):
            codec = ConvCodec(ccfg.channels, Rng(ccfg.seed).split(0))
            codec.load_state_dict(ck.section("codec"))
            codec.freeze()
            if report is not None:
                report.update({k[len("report."):]: float(v) for k, v in ck.config.items() if k.startswith("report.")})
            return codec
        log.warning("codec cache %s was built with different settings; retraining", cache)
    codec, rep = train_codec(ccfg)
    log.info("codec psnr: init %.2f dB, final %.2f dB", rep["psnr_init"], rep["psnr_final"])
    if report is not None:
        report.update(rep)
    if cache:
        ck = Checkpoint()
        merge("codec", codec.state_dict(), ck)
        ck.config["codec.key"] = _codec_key(ccfg)
        for k, v in rep.items():
            ck.config[f"report.{k}"] = repr(float(v))
        Path(cache).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ck, cache)
    return codec


def build_components(config: Config, codec=None) -> Components:
    """Fresh UNet and text encoder (from ``run.seed``) around a frozen codec."""
    root = Rng(config["run.seed"])
    ucfg, scfg = unet_configs(config)
    unet = build_unet(ucfg, scfg, root.split(0))
    tcfg = text_config(config)
    text = TextEncoder(tcfg, Vocabulary.default(), root.split(1))
    codec = obtain_codec(config) if codec is None else codec
    return Components(unet, text, codec, schedule_from(config), config, freeze_text=tcfg.freeze)


def encode_clips(codec, clips: np.ndarray) -> np.ndarray:
    """[B,F,H,W,3] pixels -> [B,F,4,h,w] latents, every frame encoded on its own."""
    B, F = clips.shape[:2]
    z = codec.encode(clips.reshape(B * F, *clips.shape[2:]))
    return z.reshape(B, F, *z.shape[1:])


def text_context(text: TextEncoder, captions: list[str]) -> tuple[Tensor, Tensor]:
    """Embed captions and the empty prompt in one pass; returns ([B,N_p,N_c], [N_p,N_c])."""
    ids = tokenize_batch(list(captions) + [""], text.vocab, text.cfg.max_len)
    emb = text(ids)
    B = len(captions)
    return emb[:B], emb[B]


@dataclass
class TrainState:
    step: int = 0
    losses: list = field(default_factory=list)  # (step, loss, domain)


def step_rng(seed: int, step: int) -> Rng:
    return Rng(seed).split(2).split(step)


def train_step(comp: Components, opt: AdamW, cfg: TrainConfig, step: int) -> tuple[float, str]:
    domain = batch_scheduler(step, cfg)
    rng = step_rng(cfg.seed, step)
    frames = 1 if domain == IMAGE else cfg.frames
    count = cfg.batch_size_image if domain == IMAGE else cfg.batch_size_video
    clips, captions = make_batch(rng.split(0), count, frames, cfg.height, cfg.width)
    z0 = encode_clips(comp.codec, clips)
    context, null = text_context(comp.text, captions)
    loss = training_loss(z0, context, comp.unet, comp.sched, rng.split(1), null_context=null, p_uncond=cfg.p_uncond)
    value = float(loss.item())
    if not math.isfinite(value):
        raise TrainingAborted(step, rng.state(), value)
    opt.zero_grad()
    backward(loss)
    opt.step()
    return value, domain


def make_optimizer(comp: Components, cfg: TrainConfig) -> AdamW:
    return AdamW(comp.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)


def to_checkpoint(comp: Components, opt: AdamW, step: int) -> Checkpoint:
    ck = Checkpoint()
    merge("unet", comp.unet.state_dict(), ck)
    merge("text", comp.text.state_dict(), ck)
    if isinstance(comp.codec, ConvCodec):
        merge("codec", comp.codec.state_dict(), ck)
    for name in opt.params:
        if name in opt.state.m:
            ck.tensors[f"opt.m.{name}"] = opt.state.m[name].copy()
            ck.tensors[f"opt.v.{name}"] = opt.state.v[name].copy()
    for line in comp.config.lines():
        key, _, value = line.partition("=")
        ck.config[f"cfg.{key}"] = value
    ck.config["train.step"] = str(step)
    ck.config["opt.step"] = str(opt.state.step)
    seed, counter, stream = step_rng(comp.config["run.seed"], step).state()
    ck.config["rng.state"] = f"{seed},{counter},{stream}"
    ck.config["codec.fingerprint"] = comp.codec.fingerprint()
    ck.config["config.hash"] = comp.config.hash()
    return ck


def config_from_checkpoint(ck: Checkpoint) -> Config:
    return Config({k[len("cfg."):]: v for k, v in ck.config.items() if k.startswith("cfg.")})


def restore(ck: Checkpoint, with_optimizer: bool = True) -> tuple[Components, Optional[AdamW], int]:
    """Rebuild components (and optionally the optimizer) from a checkpoint."""
    config = config_from_checkpoint(ck)
    if config["codec.kind"] == "identity":
        codec = IdentityCodec()
    else:
        ccfg = codec_config(config)
        codec = ConvCodec(ccfg.channels, Rng(ccfg.seed).split(0))
        codec.load_state_dict(ck.section("codec"))
        codec.freeze()
    if codec.fingerprint() != ck.config.get("codec.fingerprint"):
        raise CheckpointError("codec weights do not match the recorded fingerprint")
    comp = build_components(config, codec=codec)
    comp.unet.load_state_dict(ck.section("unet"))
    comp.text.load_state_dict(ck.section("text"))
    step = int(ck.config["train.step"])
    opt = None
    if with_optimizer:
        opt = make_optimizer(comp, train_config_from(config))
        opt.state.step = int(ck.config["opt.step"])
        m, v = ck.section("opt.m"), ck.section("opt.v")
        for name in opt.params:
            if name in m:
                opt.state.m[name] = m[name].copy()
                opt.state.v[name] = v[name].copy()
    return comp, opt, step


def write_loss_trace(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "domain"])
        for step, loss, domain in rows:
            w.writerow([step, repr(float(loss)), domain])


def read_loss_trace(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["step"]), float(r["loss"]), r["domain"]) for r in csv.DictReader(fh)]


def train_loop(comp: Components, cfg: TrainConfig, out_dir=None, opt: Optional[AdamW] = None,
               start_step: int = 0, stop_step: Optional[int] = None, history: Optional[list] = None
               ) -> tuple[Checkpoint, list]:
    """Train from ``start_step`` up to ``stop_step`` (default ``cfg.total_steps``).

    Every step draws its data, timesteps, noise and caption drops from a
    stream keyed only by (seed, step), so a resumed run replays an
    uninterrupted one exactly. Returns the final checkpoint and the loss rows.
    """
    if not getattr(comp.codec, "frozen", False):
        raise ValueError("the codec must be frozen before diffusion training")
    codec_hash = comp.codec.fingerprint()
    opt = make_optimizer(comp, cfg) if opt is None else opt
    stop = cfg.total_steps if stop_step is None else stop_step
    rows = list(history or [])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for step in range(start_step, stop):
        loss, domain = train_step(comp, opt, cfg, step)
        rows.append((step, loss, domain))
        done = step + 1
        if cfg.log_every and done % cfg.log_every == 0:
            recent = [r[1] for r in rows[-cfg.log_every:]]
            log.info("step %d loss %.4f (mean of last %d: %.4f)", done, loss, len(recent), float(np.mean(recent)))
        if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < stop:
            save_checkpoint(to_checkpoint(comp, opt, done), out / f"step_{done:06d}.ckpt")
            write_loss_trace(out / "loss.csv", rows)
    if comp.codec.fingerprint() != codec_hash:
        raise RuntimeError("codec parameters changed during training")
    ck = to_checkpoint(comp, opt, stop if stop > start_step else start_step)
    if out is not None:
        save_checkpoint(ck, out / "final.ckpt")
        write_loss_trace(out / "loss.csv", rows)
    return ck, rows


def loss_ratio(rows: list, window: int = 100) -> float:
    """Mean loss of the last ``window`` steps over the mean of the first ``window``."""
    losses = np.array([r[1] for r in rows], dtype=np.float64)
    if len(losses) < 2 * window:
        raise ValueError(f"need at least {2 * window} steps, have {len(losses)}")
    return float(losses[-window:].mean() / losses[:window].mean())


def state_summary(ck: Checkpoint) -> "OrderedDict[str, str]":
    return OrderedDict((k, v) for k, v in ck.config.items() if not k.startswith("cfg."))
