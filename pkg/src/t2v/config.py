"""``key=value`` run configuration with dotted section keys.

Every key has a default (see :data:`DEFAULTS`); a file only lists overrides.
Unknown keys and malformed values are rejected with the offending line.
"""

from __future__ import annotations

import hashlib
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


def _fraction(text: str) -> Fraction:
    f = Fraction(text.strip())
    if not 0 <= f <= 1:
        raise ValueError("must lie in [0, 1]")
    return f


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _str(text: str) -> str:
    return text.strip()


# key: (default, parser, description)
DEFAULTS: dict[str, tuple[Any, Callable[[str], Any], str]] = {
    "run.seed": (0, int, "master seed; every random stream derives from it"),
    "run.out_dir": ("runs/desk", _str, "directory for checkpoints and the loss trace"),
    "data.height": (32, int, "frame height in pixels (multiple of 8)"),
    "data.width": (32, int, "frame width in pixels (multiple of 8)"),
    "data.frames": (8, int, "frames per video clip"),
    "codec.kind": ("conv", _choice("conv", "identity"), "trained conv autoencoder or exact block-mean codec"),
    "codec.channels": (32, int, "conv codec base width"),
    "codec.steps": (2000, int, "codec training steps"),
    "codec.batch_size": (16, int, "frames per codec step"),
    "codec.lr": (2e-3, float, "codec peak learning rate (cosine decay)"),
    "codec.seed": (7, int, "codec init/data seed"),
    "codec.cache": ("", _str, "optional path: reuse a trained codec checkpoint, or write one"),
    "text.max_len": (16, int, "tokens per prompt N_p"),
    "text.dim": (64, int, "embedding width N_c"),
    "text.layers": (2, int, "transformer layers"),
    "text.heads": (4, int, "attention heads"),
    "text.freeze": (False, _bool, "keep text encoder weights fixed during training"),
    "unet.base_channels": (32, int, "channels at the finest level"),
    "unet.channel_mult": ((1, 2), _ints, "per-level channel multipliers"),
    "unet.time_embed_dim": (128, int, "timestep embedding width"),
    "unet.groups": (32, int, "max GroupNorm groups"),
    "unet.heads": (4, int, "attention heads in spatio-temporal blocks"),
    "unet.n_spatial_conv": (2, int, "spatial convolutions per block"),
    "unet.n_temporal_conv": (4, int, "temporal convolutions per block"),
    "unet.n_spatial_attn": (2, int, "spatial attentions per block (first one cross-attends)"),
    "unet.n_temporal_attn": (2, int, "temporal attentions per block"),
    "unet.temporal_pos_embed": (False, _bool, "add learned frame embeddings before temporal attention"),
    "diffusion.timesteps": (100, int, "training steps T"),
    "diffusion.schedule": ("linear", _choice("linear", "scaled_linear"), "beta interpolation"),
    "diffusion.beta_start": (1e-4, float, "first beta"),
    "diffusion.beta_end": (0.05, float, "last beta"),
    "diffusion.p_uncond": (0.1, float, "caption drop rate for classifier-free training"),
    "train.total_steps": (2000, int, "optimizer steps"),
    "train.image_fraction": (Fraction(1, 8), _fraction, "share of steps that use single-frame batches"),
    "train.batch_size_image": (8, int, "clips per image (F=1) step"),
    "train.batch_size_video": (4, int, "clips per video step"),
    "train.lr": (1e-4, float, "AdamW learning rate"),
    "train.weight_decay": (0.01, float, "decoupled weight decay"),
    "train.grad_clip": (1.0, float, "global gradient-norm clip (0 disables)"),
    "train.log_every": (100, int, "log interval in steps"),
    "train.checkpoint_every": (500, int, "checkpoint interval in steps (0: only at the end)"),
    "sample.steps": (50, int, "DDIM steps"),
    "sample.guidance": (9.0, float, "classifier-free guidance scale"),
    "sample.eta": (0.0, float, "DDIM stochasticity"),
}


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config(Mapping):
    """Immutable mapping of every known key to its effective value."""

    def __init__(self, overrides: Mapping[str, Any] | None = None):
        values = {k: d for k, (d, _, _) in DEFAULTS.items()}
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(value, str):
                value = _parse_value(key, value)
            values[key] = value
        self._values = values

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self._values.items() if k.startswith(p)}

    def lines(self) -> list[str]:
        return [f"{k}={format_value(v)}" for k, v in sorted(self._values.items())]

    def hash(self) -> str:
        """SHA-256 over the canonical form of every effective value."""
        return hashlib.sha256("\n".join(self.lines()).encode("utf-8")).hexdigest()

    def with_overrides(self, **kv) -> "Config":
        merged = dict(self._values)
        merged.update({k.replace("__", "."): v for k, v in kv.items()})
        return Config(merged)


def _parse_value(key: str, text: str) -> Any:
    _, parser, _ = DEFAULTS[key]
    try:
        return parser(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_config(lines: Iterable[str], source: str = "<config>") -> Config:
    overrides: dict[str, Any] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in overrides:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            overrides[key] = _parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return Config(overrides)


def load_config(path) -> Config:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8").splitlines(), str(path))


def render_defaults() -> str:
    """Every key with its default and description, as a commented config file."""
    out = []
    for key, (default, _, doc) in DEFAULTS.items():
        out.append(f"# {doc}")
        out.append(f"{key}={format_value(default)}")
    return "\n".join(out) + "\n"
