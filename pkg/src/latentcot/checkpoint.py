"""Named-tensor archive, bit-exact.

Layout (little-endian throughout):
    magic   b"SYNA"
    u32     version (1)
    u32     tensor count
    per tensor, in order:
        u16     name length
        bytes   UTF-8 name
        u8      dtype code (0 = float32)
        u8      ndim
        u64*    dims
    then all payloads, contiguous float32, in header order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SYNA"
VERSION = 1
_DTYPE_F32 = 0


def save_archive(path, tensors: dict[str, np.ndarray]) -> None:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor name")
    header = bytearray()
    header += MAGIC
    header += struct.pack("<II", VERSION, len(names))
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        nb = name.encode("utf-8")
        header += struct.pack("<H", len(nb)) + nb
        header += struct.pack("<BB", _DTYPE_F32, arr.ndim)
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        payloads.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        for p in payloads:
            fh.write(p)


def load_archive(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    off = 0

    def need(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated archive: wanted {n} bytes at offset {off}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if need(4) != MAGIC:
        raise CheckpointError("bad magic: not a tensor archive")
    version, count = struct.unpack("<II", need(8))
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, reader supports {VERSION}")
    metas = []
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2))
        name = need(name_len).decode("utf-8")
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        dtype_code, ndim = struct.unpack("<BB", need(2))
        if dtype_code != _DTYPE_F32:
            raise CheckpointError(f"unknown dtype code {dtype_code} for {name!r}")
        dims = struct.unpack(f"<{ndim}Q", need(8 * ndim)) if ndim else ()
        metas.append((name, dims))
    out = {}
    for name, dims in metas:
        n = int(np.prod(dims)) if dims else 1
        raw = need(4 * n)
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if off != len(blob):
        raise CheckpointError(f"trailing bytes after payload ({len(blob) - off})")
    return out
