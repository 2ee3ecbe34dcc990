"""Bit-exact binary tensor files.

Layout (all integers little-endian):

    magic   4 bytes  b"RSSM"
    version u32      currently 1
    rank    u32
    dims    u64 * rank
    payload float64, column-major
    crc32   u32      CRC-32 of the payload bytes

Column-major payload mirrors the package's vec() convention, so reshapes are
copy-free and platform-stable. All writes go through a temp-file rename, so a
killed process never leaves a truncated file behind.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = ["write_tensor", "read_tensor", "TensorFileError", "MAGIC", "VERSION"]

MAGIC = b"RSSM"
VERSION = 1


class TensorFileError(RuntimeError):
    pass


def write_tensor(path, arr: np.ndarray) -> None:
    path = Path(path)
    arr = np.asarray(arr, dtype=np.float64)
    payload = np.asfortranarray(arr).tobytes(order="F")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise TensorFileError(f"{path}: not a tensor file (bad magic)")
    version, rank = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported format version {version}")
    off = 12 + 8 * rank
    if len(raw) < off:
        raise TensorFileError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}Q", raw[12:off])
    n_bytes = 8 * int(np.prod(dims)) if rank else 8
    if rank == 0:
        dims = ()
        n_bytes = 8
    if len(raw) != off + n_bytes + 4:
        raise TensorFileError(f"{path}: payload length mismatch")
    payload = raw[off:off + n_bytes]
    (crc_stored,) = struct.unpack("<I", raw[off + n_bytes:])
    if (zlib.crc32(payload) & 0xFFFFFFFF) != crc_stored:
        raise TensorFileError(f"{path}: CRC mismatch (corrupted payload)")
    flat = np.frombuffer(payload, dtype="<f8")
    return flat.reshape(dims, order="F").copy()
