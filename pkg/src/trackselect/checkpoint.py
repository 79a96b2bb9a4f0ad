"""Checkpoint file format.

::

    b"SOLP"            magic
    u32                version
    u32                byte length of the config echo
    bytes              config echo, UTF-8 JSON with sorted keys
    u32                number of named tensors
    per tensor:
      u16              name length, then the UTF-8 name
      u32              rank, then rank x u32 axis lengths
      f32[...]         row-major payload

All integers and floats are little-endian. Selector weights, the negative
anchor bank and the optimiser moments (names prefixed ``optim.``) share the
tensor table.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"SOLP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, path="<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    def need(off, n, what):
        if off + n > len(buf):
            raise CheckpointError(f"{path} @ byte {off}: truncated {what}")

    need(0, 12, "header")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path} @ byte 0: bad magic {buf[:4]!r}")
    version, clen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path} @ byte 4: unsupported version {version}")
    off = 12
    need(off, clen, "config echo")
    config = json.loads(buf[off:off + clen])
    off += clen
    need(off, 4, "tensor count")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        need(off, 2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen + 4, "name")
        name = buf[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, 4 * rank, "shape")
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) * 4
        need(off, size, f"payload of {name}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=off).reshape(shape).astype(np.float32)
        off += size
    if off != len(buf):
        raise CheckpointError(f"{path} @ byte {off}: trailing bytes")
    return config, tensors


def write_atomic(path: str | os.PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> Path:
    return write_atomic(path, encode_checkpoint(config, tensors))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    return decode_checkpoint(buf, path)
