"""Versioned binary checkpoint framing shared by both trainable models.

Layout: magic, a 4-byte kind tag, format version, u32 header fields, a
length-prefixed metadata block, then the parameter tables as row-major
little-endian float32 with a small shape prefix each.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"KGCF"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def write_checkpoint(
    path: str | Path,
    kind: bytes,
    header: tuple[int, ...],
    meta: bytes,
    arrays: list[np.ndarray],
) -> None:
    assert len(kind) == 4
    buf = bytearray()
    buf += MAGIC + kind
    buf += struct.pack("<I", FORMAT_VERSION)
    buf += struct.pack("<I", len(header))
    buf += struct.pack(f"<{len(header)}I", *header)
    buf += struct.pack("<Q", len(meta)) + meta
    buf += struct.pack("<I", len(arrays))
    for arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f4")
        buf += struct.pack("<B", a.ndim)
        buf += struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
        buf += a.tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path: str | Path, kind: bytes):
    data = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        chunk = data[off : off + n]
        if len(chunk) != n:
            raise CheckpointError(f"{path}: truncated checkpoint")
        off += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    got_kind = take(4)
    if got_kind != kind:
        raise CheckpointError(f"{path}: kind {got_kind!r}, expected {kind!r}")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (n_header,) = struct.unpack("<I", take(4))
    header = struct.unpack(f"<{n_header}I", take(4 * n_header))
    (meta_len,) = struct.unpack("<Q", take(8))
    meta = take(meta_len)
    (n_arrays,) = struct.unpack("<I", take(4))
    arrays = []
    for _ in range(n_arrays):
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        arrays.append(arr.astype(np.float64))
    return version, header, meta, arrays
