"""Dense C-order tensors and the ``CTNS`` binary file format.

The :class:`Tensor` keeps an explicit shape and a flat contiguous buffer.
Arithmetic is delegated to numpy; layers in :mod:`crophybrid.nn` operate on
plain ndarrays and accept a Tensor anywhere an array is expected.
"""
from __future__ import annotations

import io
import math
import operator
import struct
from math import prod
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

MAGIC = b"CTNS"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


class ShapeError(ValueError):
    pass


class SqueezeError(ShapeError):
    pass


class AxisError(IndexError):
    pass


class FormatError(ValueError):
    pass


def _check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {list(shape)}")
    return shape


def c_strides(shape: Sequence[int]) -> tuple[int, ...]:
    """Element (not byte) strides of a C-order layout."""
    strides = []
    step = 1
    for extent in reversed(shape):
        strides.append(step)
        step *= extent
    return tuple(reversed(strides))


class Tensor:
    """Shape plus a contiguous float buffer, last axis fastest.

    ``dtype`` is float32 for training/inference and float64 for gradient
    checking. A 0-rank tensor holds a single scalar.
    """

    __slots__ = ("_shape", "_data")

    def __init__(self, data, shape: Sequence[int] | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if shape is None:
            shape = arr.shape
        shape = _check_shape(shape)
        flat = np.ascontiguousarray(arr).reshape(-1)
        if flat.size != prod(shape):
            raise ShapeError(f"buffer of {flat.size} elements does not fit shape {list(shape)}")
        self._shape = shape
        self._data = flat

    @property
    def shape(self) -> tuple[int, ...]:
        return self._shape

    @property
    def data(self) -> np.ndarray:
        """The flat C-order buffer (a view, not a copy)."""
        return self._data

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def ndim(self) -> int:
        return len(self._shape)

    @property
    def strides(self) -> tuple[int, ...]:
        return c_strides(self._shape)

    def __len__(self) -> int:
        return self._data.size

    def offset(self, index: Sequence[int]) -> int:
        if len(index) != self.ndim:
            raise AxisError(f"index of rank {len(index)} for tensor of rank {self.ndim}")
        off = 0
        for i, extent, stride in zip(index, self._shape, self.strides):
            if not 0 <= i < extent:
                raise AxisError(f"index {i} out of range for extent {extent}")
            off += i * stride
        return off

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            index = (index,)
        return self._data[self.offset(index)].item()

    def numpy(self) -> np.ndarray:
        """Shaped view onto the buffer."""
        return self._data.reshape(self._shape)

    def __array__(self, dtype=None, copy=None):
        arr = self.numpy()
        return arr if dtype is None else arr.astype(dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._data.astype(dtype), self._shape)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor(self._data, shape)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self._shape == other._shape
            and self.dtype == other.dtype
            and self._data.tobytes() == other._data.tobytes()
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self._shape)}, dtype={self.dtype.name})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def new(shape: Sequence[int], fill: float = 0.0, dtype=np.float32) -> Tensor:
    shape = _check_shape(shape)
    return Tensor(np.full(prod(shape), fill, dtype=dtype), shape)


def squeeze(t: Tensor, axes: Sequence[int]) -> Tensor:
    """Drop the named unit axes; the buffer is shared, not copied."""
    axes = _normalize_axes(axes, t.ndim)
    for ax in axes:
        if t.shape[ax] != 1:
            raise SqueezeError(f"cannot squeeze axis {ax} of extent {t.shape[ax]}")
    shape = [s for i, s in enumerate(t.shape) if i not in axes]
    out = Tensor.__new__(Tensor)
    out._shape = tuple(shape)
    out._data = t.data
    return out


def unsqueeze(t: Tensor, axes: Sequence[int]) -> Tensor:
    """Insert unit axes so that they sit at ``axes`` in the result."""
    rank = t.ndim + len(axes)
    axes = _normalize_axes(axes, rank)
    it = iter(t.shape)
    shape = tuple(1 if i in axes else next(it) for i in range(rank))
    out = Tensor.__new__(Tensor)
    out._shape = shape
    out._data = t.data
    return out


def _normalize_axes(axes: Sequence[int], rank: int) -> set[int]:
    norm = set()
    for ax in axes:
        if not -rank <= ax < rank:
            raise AxisError(f"axis {ax} out of range for rank {rank}")
        norm.add(ax % rank)
    return norm


_ELEMENTWISE = {
    "add": operator.add,
    "sub": operator.sub,
    "mul": operator.mul,
    "div": operator.truediv,
    "max": np.maximum,
}


def elementwise(op: str, a, b) -> Tensor:
    """Binary op on equal shapes, or tensor against a Python/0-d scalar.

    Division by an exact zero follows IEEE rules (inf/nan) and is not
    trapped.
    """
    fn = _ELEMENTWISE[op]
    a_scalar = not isinstance(a, Tensor)
    b_scalar = not isinstance(b, Tensor)
    if a_scalar and b_scalar:
        raise TypeError("at least one operand must be a Tensor")
    if not a_scalar and not b_scalar and a.shape != b.shape:
        raise ShapeError(f"shape mismatch {list(a.shape)} vs {list(b.shape)}")
    shape = b.shape if a_scalar else a.shape
    av = a if a_scalar else a.data
    bv = b if b_scalar else b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        return Tensor(fn(av, bv), shape)


_REDUCE = {"sum": np.sum, "mean": np.mean, "max": np.max}


def reduce(op: str, t: Tensor, axis: int | None = None) -> Tensor:
    """Reduce along ``axis`` (removed from the result), or over everything.

    Full sums and means are correctly rounded (``math.fsum``).
    """
    fn = _REDUCE[op]
    if axis is None:
        if op == "max":
            return Tensor(np.asarray(t.data.max()), ())
        # correctly rounded, so a full reduction never depends on summation order
        total = math.fsum(t.data.tolist())
        value = total if op == "sum" else total / t.data.size
        return Tensor(np.asarray(value, dtype=t.dtype), ())
    if not -t.ndim <= axis < t.ndim:
        raise AxisError(f"axis {axis} out of range for rank {t.ndim}")
    out = fn(t.numpy(), axis=axis)
    if out.ndim == 0:
        return Tensor(np.asarray(out), ())
    return Tensor(out)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects two rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape[1]} vs {b.shape[0]}")
    return Tensor(a.numpy() @ b.numpy())


# -- binary format ---------------------------------------------------------


def write_tensor(fh: BinaryIO, t) -> None:
    arr = np.asarray(t)
    dt = np.dtype(arr.dtype).newbyteorder("<")
    if dt not in _DTYPE_CODES:
        arr = arr.astype(np.float64)
        dt = np.dtype("<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<BBB", VERSION, _DTYPE_CODES[dt], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    head = fh.read(7)
    if len(head) != 7 or head[:4] != MAGIC:
        raise FormatError("not a CTNS tensor block")
    version, code, rank = struct.unpack("<BBB", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported CTNS version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    n = prod(shape)
    raw = fh.read(n * dt.itemsize)
    if len(raw) != n * dt.itemsize:
        raise FormatError("truncated tensor payload")
    return Tensor(np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("=")), shape)


def to_bytes(t) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def from_bytes(raw: bytes) -> Tensor:
    return read_tensor(io.BytesIO(raw))


def save(path, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load(path) -> Tensor:
    with open(Path(path), "rb") as fh:
        return read_tensor(fh)


def save_many(path, tensors: Iterable) -> None:
    with open(path, "wb") as fh:
        for t in tensors:
            write_tensor(fh, t)


def load_many(path) -> list[Tensor]:
    out = []
    with open(path, "rb") as fh:
        while fh.peek(1) if hasattr(fh, "peek") else True:
            out.append(read_tensor(fh))
    return out
