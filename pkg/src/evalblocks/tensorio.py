"""Binary tensor artifact format and artifact hashing.

Every patch, embedding, and projection exchanged between blocks is an
``.evbt`` file:

    magic "EVBT" | version 0x01 | dtype code | rank | rank x u32 dims | data

All multi-byte fields are little-endian; data is row-major. The format is
deliberately timestamp-free so identical tensors produce byte-identical
files, which is what makes content-addressed caching exact.

Tensors are plain numpy arrays with dtype float32, float64, or uint8 and
rank 1..4.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import TensorFormatError

MAGIC = b"EVBT"
VERSION = 1
MAX_RANK = 4

# dtype code -> little-endian numpy dtype
_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_KIND_TO_CODE = {("f", 4): 1, ("f", 8): 2, ("u", 1): 3}

Digest = str  # lowercase hex SHA-256


def dtype_code(arr: np.ndarray) -> int:
    """Return the format's dtype code for an array, or raise."""
    code = _KIND_TO_CODE.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise TensorFormatError(
            f"unsupported dtype {arr.dtype}; supported: float32, float64, uint8"
        )
    return code


def validate_tensor(arr: np.ndarray) -> None:
    """Check the rank/shape invariants shared by writer and blocks."""
    if not isinstance(arr, np.ndarray):
        raise TensorFormatError(f"expected numpy array, got {type(arr).__name__}")
    dtype_code(arr)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise TensorFormatError(f"rank must be 1..{MAX_RANK}, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise TensorFormatError(f"all dimensions must be >= 1, got shape {arr.shape}")


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write a tensor atomically (temp file + rename into place).

    Concurrent writers to the same path serialize on the final rename;
    readers never observe a half-written file.
    """
    path = Path(path)
    validate_tensor(arr)
    code = dtype_code(arr)
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes()

    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_header(fh) -> tuple[np.dtype, tuple[int, ...]]:
    head = fh.read(7)
    if len(head) < 7 or head[:4] != MAGIC:
        raise TensorFormatError(f"bad magic: not an EVBT tensor file")
    version, code, rank = head[4], head[5], head[6]
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"unsupported dtype code {code}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"invalid rank {rank}")
    dims_raw = fh.read(4 * rank)
    if len(dims_raw) < 4 * rank:
        raise TensorFormatError("truncated header")
    shape = struct.unpack(f"<{rank}I", dims_raw)
    if any(d < 1 for d in shape):
        raise TensorFormatError(f"invalid shape {shape}")
    return _CODE_TO_DTYPE[code], shape


def read_tensor_header(path: str | Path) -> tuple[np.dtype, tuple[int, ...]]:
    """Read only (dtype, shape); cheap manifest-validation helper."""
    with open(path, "rb") as fh:
        return _read_header(fh)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor written by write_tensor, bit-exactly."""
    with open(path, "rb") as fh:
        dtype, shape = _read_header(fh)
        n = int(np.prod(shape))
        expected = n * dtype.itemsize
        data = fh.read(expected + 1)
    if len(data) < expected:
        raise TensorFormatError(
            f"truncated data: shape {shape} needs {expected} bytes, found {len(data)}"
        )
    if len(data) > expected:
        raise TensorFormatError(f"trailing bytes after {expected}-byte payload")
    arr = np.frombuffer(data, dtype=dtype).reshape(shape)
    # hand back a native-endian, writable copy for downstream math
    return arr.astype(dtype.newbyteorder("="), copy=True)


def hash_artifact(path: str | Path) -> Digest:
    """SHA-256 of the file bytes; independent of path, mtime, platform."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_bytes(data: bytes) -> Digest:
    return hashlib.sha256(data).hexdigest()
