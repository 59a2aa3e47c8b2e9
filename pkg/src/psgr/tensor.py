"""Dense tensor values, deterministic RNG, and the PSTN tensor file format.

Tensors are immutable row-major numpy arrays (f32 or f64, rank <= 4) that
are guaranteed finite: construction and every public op re-checks. The
RNG is numpy's Philox, a counter-based generator whose stream depends
only on the 64-bit seed, not on platform or call pattern.
"""

import hashlib
import struct

import numpy as np

from . import _backend
from .errors import NotFiniteError, PstnFormatError, ShapeError, ValidationError

DTYPES = {"f32": np.float32, "f64": np.float64}
_NP_TO_NAME = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

MAX_RANK = 4


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NotFiniteError(f"{op}: produced non-finite values")


class Tensor:
    """Immutable dense tensor; shape x dtype wrapper over a numpy array."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        np_dtype = DTYPES[dtype] if dtype is not None else None
        arr = np.ascontiguousarray(data, dtype=np_dtype)
        if arr.dtype not in (np.float32, np.float64):
            # default untyped python input to f64
            if np_dtype is None and arr.dtype.kind in ("i", "u", "b", "f"):
                arr = arr.astype(np.float64)
            else:
                raise ValidationError(f"Tensor: unsupported dtype {arr.dtype}")
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"Tensor: rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
        _check_finite(arr, "Tensor")
        if arr is data and arr.flags.writeable:
            arr = arr.copy()  # do not freeze the caller's array
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return _NP_TO_NAME[self.data.dtype]

    def numpy(self):
        return np.array(self.data)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.data, dtype=dtype)

    def reshape(self, new_shape):
        new_shape = tuple(int(s) for s in new_shape)
        n_new = int(np.prod(new_shape)) if new_shape else 1
        if n_new != self.size:
            raise ShapeError(
                f"reshape: cannot view {self.shape} ({self.size} elements) "
                f"as {new_shape} ({n_new} elements)")
        return Tensor(self.data.reshape(new_shape))

    def astype(self, dtype):
        if dtype not in DTYPES:
            raise ValidationError(f"astype: unknown dtype {dtype!r}")
        return Tensor(self.data.astype(DTYPES[dtype]))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.all(self.data == other.data))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b):
    """Matrix product with a fixed reduction order (see backend notes)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected two matrices, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ValidationError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    out = _backend.matmul(a.data, b.data)
    _check_finite(out, "matmul")
    return Tensor(out)


def _binary(op_name, fn, a, b):
    a = _as_tensor(a)
    if np.isscalar(b):
        out = fn(a.data, a.data.dtype.type(b))
    else:
        b = _as_tensor(b)
        if a.shape != b.shape:
            raise ShapeError(f"{op_name}: shape mismatch {a.shape} vs {b.shape}")
        out = fn(a.data, b.data)
    _check_finite(out, op_name)
    return Tensor(out)


def add(a, b):
    return _binary("add", np.add, a, b)


def sub(a, b):
    return _binary("sub", np.subtract, a, b)


def mul(a, b):
    return _binary("mul", np.multiply, a, b)


def scale(a, c):
    return _binary("scale", np.multiply, a, float(c))


def relu(a):
    a = _as_tensor(a)
    return Tensor(np.maximum(a.data, 0))


SIGMOID_CLAMP = 30.0


def sigmoid(a):
    """Logistic function; inputs clamped to +-30 before exp for safety."""
    a = _as_tensor(a)
    x = np.clip(a.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    out = 1.0 / (1.0 + np.exp(-x))
    _check_finite(out, "sigmoid")
    return Tensor(out)


# ---------------------------------------------------------------------------
# deterministic RNG

class Rng:
    """Counter-based Philox stream; identical seed -> identical draws."""

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def normal(self, shape=(), dtype="f64"):
        out = self._gen.standard_normal(size=shape, dtype=np.float64)
        return np.asarray(out, dtype=DTYPES[dtype])

    def uniform(self, low=0.0, high=1.0, shape=(), dtype="f64"):
        out = self._gen.uniform(low, high, size=shape)
        return np.asarray(out, dtype=DTYPES[dtype])

    def integers(self, low, high, shape=()):
        return self._gen.integers(low, high, size=shape, dtype=np.int64)

    def permutation(self, n):
        return self._gen.permutation(n)


def derive_seed(root_seed, tag):
    """Stable 64-bit child seed from (root seed, purpose tag)."""
    key = int(root_seed).to_bytes(8, "little", signed=False)
    digest = hashlib.blake2b(tag.encode("utf-8"), key=key, digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# PSTN v1 tensor file format

PSTN_MAGIC = b"PSTN"
PSTN_VERSION = 1
_PSTN_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_PSTN_FROM_NP = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


def pstn_bytes(arr):
    """Serialize an f32/f64/u8 array to PSTN v1 bytes."""
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _PSTN_FROM_NP:
        raise ValidationError(f"pstn: unsupported dtype {arr.dtype}")
    if arr.ndim > 8:
        raise ShapeError(f"pstn: rank {arr.ndim} too large")
    header = PSTN_MAGIC + struct.pack("<BBBB", PSTN_VERSION, _PSTN_FROM_NP[arr.dtype],
                                      arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return header + dims + payload


def parse_pstn(buf):
    """Parse PSTN v1 bytes into an array; rejects unknown magic/version/dtype."""
    if len(buf) < 8:
        raise PstnFormatError("pstn: truncated header")
    if buf[:4] != PSTN_MAGIC:
        raise PstnFormatError(f"pstn: bad magic {buf[:4]!r}")
    version, dtype_code, ndim, pad = struct.unpack("<BBBB", buf[4:8])
    if version != PSTN_VERSION:
        raise PstnFormatError(f"pstn: unsupported version {version}")
    if dtype_code not in _PSTN_CODES:
        raise PstnFormatError(f"pstn: unknown dtype code {dtype_code}")
    offset = 8 + 8 * ndim
    if len(buf) < offset:
        raise PstnFormatError("pstn: truncated dimension list")
    shape = struct.unpack(f"<{ndim}Q", buf[8:offset]) if ndim else ()
    dtype = _PSTN_CODES[dtype_code]
    count = int(np.prod(shape)) if ndim else 1
    expected = offset + count * dtype.itemsize
    if len(buf) != expected:
        raise PstnFormatError(f"pstn: payload size {len(buf) - offset} does not match "
                              f"shape {shape} ({count} x {dtype.itemsize} bytes)")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return np.ascontiguousarray(arr.astype(dtype.newbyteorder("=")))


def write_pstn(path, arr):
    with open(path, "wb") as fh:
        fh.write(pstn_bytes(arr))


def read_pstn(path):
    with open(path, "rb") as fh:
        return parse_pstn(fh.read())


def read_tensor(path, dtype=None):
    """Read a PSTN file as a Tensor (f32/f64 contents only)."""
    arr = read_pstn(path)
    if arr.dtype == np.uint8 and dtype is None:
        raise ValidationError(f"{path}: u8 payload, expected a float tensor")
    return Tensor(arr, dtype=dtype)
