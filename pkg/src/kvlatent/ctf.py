"""Binary tensor file format used by the CLI pipeline.

Layout, all little-endian:

    magic   4 bytes  b"CARE"
    version u32      1
    dtype   u8       0 = float32, 1 = float64
    ndim    u8
    dims    ndim x u64
    payload product(dims) values, row-major

Values are always returned as float64; float32 payloads are up-converted on
read. Writing the array a reader produced, with the dtype code the reader
reported, reproduces the original bytes exactly.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"CARE"
VERSION = 1
DTYPE_F32 = 0
DTYPE_F64 = 1

_HEADER = struct.Struct("<4sIBB")
_DIM = struct.Struct("<Q")
_NP_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}


def write_ctf(path, array, dtype_code: int = DTYPE_F64) -> None:
    """Serialize `array` to `path`; parent directories must already exist."""
    if dtype_code not in _NP_DTYPES:
        raise ValidationError(f"unknown dtype code {dtype_code}")
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim < 1:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("refusing to serialize non-finite values")
    parts = [_HEADER.pack(MAGIC, VERSION, dtype_code, arr.ndim)]
    parts.extend(_DIM.pack(d) for d in arr.shape)
    parts.append(np.ascontiguousarray(arr, dtype=_NP_DTYPES[dtype_code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_ctf_ex(path) -> tuple[np.ndarray, int]:
    """Read a tensor and its on-disk dtype code. Values come back as float64."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, dtype_code, ndim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    if dtype_code not in _NP_DTYPES:
        raise ValidationError(f"{path}: unknown dtype code {dtype_code}")
    if ndim < 1:
        raise ValidationError(f"{path}: ndim must be at least 1")
    offset = _HEADER.size
    if len(data) < offset + ndim * _DIM.size:
        raise ValidationError(f"{path}: truncated dimension list")
    dims = []
    for _ in range(ndim):
        dims.append(_DIM.unpack_from(data, offset)[0])
        offset += _DIM.size
    dtype = _NP_DTYPES[dtype_code]
    count = 1
    for d in dims:
        count *= d
    expected = offset + count * dtype.itemsize
    if len(data) != expected:
        raise ValidationError(
            f"{path}: payload length {len(data) - offset} does not match "
            f"dims {tuple(dims)}"
        )
    values = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    values = values.astype(np.float64).reshape(dims)
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{path}: payload contains non-finite values")
    return values, dtype_code


def read_ctf(path) -> np.ndarray:
    arr, _ = read_ctf_ex(path)
    return arr
