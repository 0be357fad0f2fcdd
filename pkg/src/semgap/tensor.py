"""Bit-exact dense tensor helpers.

Tensors are plain C-contiguous numpy arrays of ``float32`` or ``float64``;
this module adds the pieces numpy leaves implementation-defined: inner
products with a pinned accumulation order, and lossless hex encoding of the
underlying IEEE-754 bit patterns.
"""

import numpy as np

from . import kernels
from .errors import NumericError, SerializationError, ShapeError

DTYPES = {"fp32": np.dtype(np.float32), "fp64": np.dtype(np.float64)}
_LE = {"fp32": "<f4", "fp64": "<f8"}


def dtype_name(dtype):
    dtype = np.dtype(dtype)
    for name, d in DTYPES.items():
        if d == dtype:
            return name
    raise ShapeError(f"unsupported dtype {dtype}; expected fp32 or fp64")


def as_tensor(values, dtype=np.float32):
    """Return ``values`` as a C-contiguous array of a supported float dtype."""
    arr = np.ascontiguousarray(values, dtype=dtype)
    dtype_name(arr.dtype)
    return arr


def check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        bad = "NaN" if np.isnan(arr).any() else "inf"
        raise NumericError(f"{bad} encountered in {where}")
    return arr


def _vector_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError("dot products take 1-D vectors")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    dtype_name(a.dtype)
    return np.ascontiguousarray(a), np.ascontiguousarray(b)


def dot_sequential(a, b):
    """Left fold ``((a0*b0) + a1*b1) + ...``, one rounding per product and per add."""
    a, b = _vector_pair(a, b)
    return a.dtype.type(kernels.dot(a, b, a.dtype.type(0), 0))


def dot_blocked(a, b, block):
    """Sequential sums inside consecutive blocks of ``block``, partials combined left to right."""
    if int(block) < 1:
        raise ShapeError(f"block must be >= 1, got {block}")
    a, b = _vector_pair(a, b)
    return a.dtype.type(kernels.dot(a, b, a.dtype.type(0), int(block)))


def to_hex(arr):
    """Little-endian IEEE-754 bytes of ``arr`` (row-major) as a hex string."""
    arr = np.asarray(arr)
    return arr.astype(_LE[dtype_name(arr.dtype)], copy=False).tobytes(order="C").hex()


def from_hex(payload, shape, dtype, where="payload"):
    name = dtype if isinstance(dtype, str) else dtype_name(dtype)
    if name not in _LE:
        raise SerializationError(f"{where}: unsupported dtype {name!r}")
    try:
        raw = bytes.fromhex(payload)
    except (TypeError, ValueError) as exc:
        raise SerializationError(f"{where}: payload is not valid hex") from exc
    count = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
    width = DTYPES[name].itemsize
    if len(raw) != count * width:
        raise SerializationError(
            f"{where}: payload holds {len(raw)} bytes, shape {list(shape)} needs {count * width}"
        )
    arr = np.frombuffer(raw, dtype=_LE[name]).astype(DTYPES[name])
    return arr.reshape(shape)


def bits(x):
    """Unsigned integer view of a float scalar/array, for bitwise comparisons."""
    arr = np.asarray(x)
    return arr.view(np.uint32 if arr.dtype == np.float32 else np.uint64)


def ulp_distance(a, b):
    """Number of representable values between ``a`` and ``b`` (same dtype, finite)."""
    a = np.asarray(a)
    b = np.asarray(b, dtype=a.dtype)
    itype = np.int32 if a.dtype == np.float32 else np.int64
    ia = a.view(itype).astype(np.int64)
    ib = b.view(itype).astype(np.int64)
    # map sign-magnitude ordering onto a monotone integer line
    lim = np.int64(np.iinfo(itype).min)
    ia = np.where(ia < 0, lim - ia, ia)
    ib = np.where(ib < 0, lim - ib, ib)
    return np.abs(ia - ib)
