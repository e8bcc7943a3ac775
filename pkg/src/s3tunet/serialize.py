"""Little-endian binary tensor records.

Layout of one record::

    b"S3TU" | u32 version (=1) | u32 rank | rank x u64 dims | float64 payload (row-major)

Checkpoints are built on top of this in :mod:`s3tunet.model`.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"S3TU"
VERSION = 1


class FormatError(ValueError):
    """A tensor record or checkpoint could not be decoded."""


def write_tensor(fh, array) -> None:
    array = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(array.tobytes(order="C"))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated data while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh) -> np.ndarray:
    magic = _read_exact(fh, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported tensor format version {version} (expected {VERSION})")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "dims")) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, 8 * count, "payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def tensor_to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    out = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor record")
    return out


def save_tensor(array, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
