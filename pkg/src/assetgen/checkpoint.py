"""Flat binary parameter container.

Layout (all integers little-endian):

    magic   4 bytes  b"AGT1"
    version u32      currently 1
    count   u32      number of records
    records, each:
        name_len u16
        name     name_len bytes, utf-8
        ndim     u8
        shape    ndim * u32
        data     prod(shape) * f32, little-endian, row-major
    crc     u32      zlib.crc32 over everything between the header and here

Values are stored as float32 regardless of the in-memory dtype.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"AGT1"
VERSION = 1


class CheckpointError(Exception):
    """Raised on version mismatch, truncation, or checksum failure."""


def save_arrays(path, arrays: dict[str, np.ndarray]):
    """Write named arrays; iteration order of the dict is preserved."""
    body = bytearray()
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", raw.ndim)
        body += struct.pack(f"<{raw.ndim}I", *raw.shape)
        body += raw.tobytes()
    blob = MAGIC + struct.pack("<II", VERSION, len(arrays)) + bytes(body)
    blob += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


def load_arrays(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter container")
    version, count = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: container version {version}, expected {VERSION}")
    body = blob[12:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    out: dict[str, np.ndarray] = {}
    off = 0
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            out[name] = arr.copy()
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated container ({e})") from e
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after {count} records")
    return out
