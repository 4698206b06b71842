"""Caption tokenizer and a small transformer text encoder producing [N_p, N_c] embeddings."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import Embedding, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .rng import Rng
from .tensor import Tensor, no_grad, silu

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"

WORDS = (
    "a", "an", "the", "is", "and", "on", "of", "with",
    "red", "green", "blue", "yellow", "white", "black", "orange", "purple",
    "square", "circle", "triangle", "shape", "ball", "box",
    "moving", "moves", "going", "left", "right", "up", "down",
    "slowly", "quickly", "small", "big", "dark", "background", "video",
)


class Vocabulary:
    """Dense token -> id map; ``<pad>`` is always 0."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:4]) != [PAD, BOS, EOS, UNK]:
            raise ValueError("vocabulary must start with <pad>, <bos>, <eos>, <unk>")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls([PAD, BOS, EOS, UNK, *WORDS])

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.ids.get(token, self.ids[UNK])

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return self.ids[BOS]

    @property
    def eos_id(self) -> int:
        return self.ids[EOS]

    @property
    def unk_id(self) -> int:
        return self.ids[UNK]

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{t}\t{i}\n" for i, t in enumerate(self.tokens)), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pairs = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            tok, _, idx = line.rpartition("\t")
            if not tok:
                raise ValueError(f"{path}:{lineno}: expected 'token<TAB>id'")
            pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: ids are not dense")
        return cls([t for _, t in pairs])


def tokenize(prompt: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """Lowercase whitespace tokenization wrapped in BOS/EOS and padded to ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must leave room for BOS and EOS")
    words = prompt.lower().split()[: max_len - 2]
    ids = [vocab.bos_id, *(vocab[w] for w in words), vocab.eos_id]
    ids += [vocab.pad_id] * (max_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


def tokenize_batch(prompts: Sequence[str], vocab: Vocabulary, max_len: int) -> np.ndarray:
    return np.stack([tokenize(p, vocab, max_len) for p in prompts])


@dataclass
class TextConfig:
    max_len: int = 16  # N_p
    dim: int = 64  # N_c
    layers: int = 2
    heads: int = 4
    freeze: bool = False

    @classmethod
    def full_scale(cls) -> "TextConfig":
        return cls(max_len=77, dim=768, layers=2, heads=12)


class _EncoderLayer(Module):
    def __init__(self, dim: int, heads: int, rng: Rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng.split(0))
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, 4 * dim, rng.split(1))
        self.fc2 = Linear(4 * dim, dim, rng.split(2))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(silu(self.fc1(self.norm2(x))))


class TextEncoder(Module):
    """Token + learned position embeddings followed by pre-norm transformer layers."""

    def __init__(self, cfg: TextConfig, vocab: Vocabulary, rng: Rng):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.token_embed = Embedding(len(vocab), cfg.dim, rng.split(0))
        self.pos_embed = Parameter(rng.split(1).normal((cfg.max_len, cfg.dim)) * 0.02)
        for i in range(cfg.layers):
            setattr(self, f"layer{i}", _EncoderLayer(cfg.dim, cfg.heads, rng.split(2 + i)))
        self.final_norm = LayerNorm(cfg.dim)
        object.__setattr__(self, "_null_cache", None)

    def forward(self, ids) -> Tensor:
        """Encode token ids [N_p] or [B, N_p] to [.., N_p, N_c]."""
        ids = np.asarray(ids)
        if ids.shape[-1] != self.cfg.max_len:
            raise ValueError(f"expected {self.cfg.max_len} tokens, got {ids.shape[-1]}")
        x = self.token_embed(ids) + self.pos_embed
        for i in range(self.cfg.layers):
            x = getattr(self, f"layer{i}")(x)
        return self.final_norm(x)

    def encode(self, prompts: Sequence[str] | str) -> Tensor:
        single = isinstance(prompts, str)
        ids = tokenize_batch([prompts] if single else list(prompts), self.vocab, self.cfg.max_len)
        out = self(ids)
        return out.reshape(out.shape[1:]) if single else out

    def _fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for _, p in self.named_parameters():
            h.update(p.data.tobytes())
        return h.hexdigest()

    def null_embedding(self) -> Tensor:
        """Embedding of the empty prompt; cached until parameters change."""
        key = self._fingerprint()
        cached = self._null_cache
        if cached is None or cached[0] != key:
            with no_grad():
                emb = self.encode("")
            cached = (key, emb)
            object.__setattr__(self, "_null_cache", cached)
        return cached[1]
