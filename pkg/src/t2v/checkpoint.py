"""Bit-exact checkpoint container.

Layout (little endian)::

    b"MST2VCKP" | u32 version | u32 count
    count x ( u16 name_len | name | u8 rank | rank x u64 dim | f32 data )
    u32 config_len | config (UTF-8 "key=value" lines)
    u32 crc32 of everything above
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MST2VCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    config: "OrderedDict[str, str]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def section(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return OrderedDict((k[len(p):], v) for k, v in self.tensors.items() if k.startswith(p))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: rank {arr.ndim} too large")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    text = "".join(f"{k}={_check_value(k, v)}\n" for k, v in ckpt.config.items()).encode("utf-8")
    out += struct.pack("<I", len(text)) + text
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def _check_value(key: str, value) -> str:
    value = str(value)
    if "=" in key or "\n" in key or "\n" in value or not key:
        raise CheckpointError(f"config entry {key!r} cannot be serialised")
    return value


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(len(MAGIC))
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors: OrderedDict = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}Q")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    (clen,) = r.unpack("<I")
    text = r.take(clen).decode("utf-8")
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint footer")
    if zlib.crc32(buf[:body_end]) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch")
    config: OrderedDict = OrderedDict()
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        if key in config:
            raise CheckpointError(f"duplicate config key {key!r}")
        config[key] = value
    return Checkpoint(tensors, config)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = encode_checkpoint(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def merge(prefix: str, tensors: Mapping[str, np.ndarray], into: Checkpoint) -> None:
    for name, arr in tensors.items():
        key = f"{prefix}.{name}"
        if key in into.tensors:
            raise CheckpointError(f"duplicate tensor name {key!r}")
        into.tensors[key] = np.asarray(arr)
