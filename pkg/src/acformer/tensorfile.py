"""``VTF1`` tensor files and atomic file writes.

Layout: ``b"VTF1"``, ``ndim`` (u32 LE), ``ndim`` dims (u32 LE each), then the
row-major payload as little-endian float32. Arrays are widened to float64 on
read; writing narrows back to float32, so read-then-write is byte-identical.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"VTF1"


def encode_tensor(arr) -> bytes:
    a = np.asarray(arr)
    if not np.isfinite(a).all():
        raise DataError("refusing to write a tensor with non-finite values")
    header = MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise DataError("not a VTF1 tensor file (bad magic)")
    try:
        (ndim,) = struct.unpack_from("<I", blob, 4)
        dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    except struct.error:
        raise DataError("truncated VTF1 header") from None
    start = 8 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - start != 4 * count:
        raise DataError(
            f"VTF1 payload is {len(blob) - start} bytes, dims {list(dims)} need {4 * count}"
        )
    return np.frombuffer(blob, dtype="<f4", offset=start).reshape(dims).astype(np.float64)


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_tensor(path, arr) -> None:
    atomic_write_bytes(path, encode_tensor(arr))


def tensor_hash(arr) -> str:
    """sha256 over shape and float64 LE contents."""
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    h = hashlib.sha256(struct.pack(f"<{a.ndim}I", *a.shape))
    h.update(a.tobytes())
    return h.hexdigest()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
