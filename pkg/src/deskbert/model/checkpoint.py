"""Binary checkpoint container.

Layout (all integers little-endian u32)::

    b"NBKT" | version | config byte length | config text (UTF-8, sorted key=value lines)
    | tensor count | per tensor: name length, name, rank, extents..., float32 data
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NBKT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_config_text(config: Mapping[str, str]) -> str:
    lines = []
    for key in sorted(config):
        value = str(config[key])
        if "\n" in value or "=" in key:
            raise CheckpointError(f"config entry {key!r} cannot be stored as key=value")
        lines.append(f"{key}={value}\n")
    return "".join(lines)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        out[key] = value
    return out


def dumps(config: Mapping[str, str], tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    u32 = lambda n: buf.write(struct.pack("<I", n))  # noqa: E731
    buf.write(MAGIC)
    u32(VERSION)
    text = canonical_config_text(config).encode("utf-8")
    u32(len(text))
    buf.write(text)
    u32(len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        u32(len(raw_name))
        buf.write(raw_name)
        u32(arr.ndim)
        for n in arr.shape:
            u32(n)
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    def u32():
        return struct.unpack("<I", take(4))[0]

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = parse_config_text(bytes(take(u32())).decode("utf-8"))
    tensors = {}
    for _ in range(u32()):
        name = bytes(take(u32())).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        tensors[name] = data
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return config, tensors


def save(path, config: Mapping[str, str], tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.write_bytes(dumps(config, tensors))
    return path


def load(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
