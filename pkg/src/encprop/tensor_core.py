"""Minimal dense-tensor math used by the denoiser and the analysis tooling.

All operations are pure: inputs are never mutated and repeated calls return
bit-identical results. Matrix multiplication accumulates strictly left to
right over the contracted axis, so a sequential and a parallel caller see
exactly the same bits. Values are 64-bit floats throughout.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    """Immutable dense array of float64 values with a fixed shape.

    The backing buffer is row-major and marked read-only; building a Tensor
    from non-finite data raises.
    """

    __slots__ = ("_data",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "_data", arr)

    @property
    def data(self) -> np.ndarray:
        """Read-only row-major view of the values."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        return float(self._data.reshape(-1)[0])

    def tolist(self):
        return self._data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))


def tensor(data, shape: Sequence[int] | None = None) -> Tensor:
    """Build a Tensor from nested lists, an ndarray, or a flat list + shape."""
    return Tensor(data, shape)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=np.float64))


def _wrap(arr: np.ndarray) -> Tensor:
    return Tensor(arr)


def _wrap_trusted(arr: np.ndarray) -> Tensor:
    """Wrap a freshly computed array without the finite-value scan.

    Only for internal hot paths whose inputs are already finite and whose
    operations cannot produce non-finite values at this scale; public
    constructors always validate.
    """
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    t = object.__new__(Tensor)
    object.__setattr__(t, "_data", arr)
    return t


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; operands must have identical shapes."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _wrap(a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference; operands must have identical shapes."""
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _wrap(a.data - b.data)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply every element by the finite scalar ``c``."""
    if not math.isfinite(c):
        raise ValueError(f"scale: non-finite scalar {c!r}")
    return _wrap(a.data * float(c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a`` (m x k) and ``b`` (k x n).

    Each output element accumulates its k products strictly left to right,
    bit-identical to a naive triple loop. No FMA, no pairwise reduction.
    """
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul: need 2-D operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    kb, n = b.shape
    if k != kb:
        raise ShapeError(f"matmul: inner dimensions disagree {a.shape} vs {b.shape}")
    out = np.zeros((m, n), dtype=np.float64)
    ad, bd = a.data, b.data
    for i in range(k):
        out += ad[:, i : i + 1] * bd[i : i + 1, :]
    return _wrap(out)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """Concatenate along ``axis``; all other axes must match exactly."""
    if len(a.shape) != len(b.shape):
        raise ShapeError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    if not 0 <= axis < len(a.shape):
        raise ShapeError(f"concat: axis {axis} out of range for shape {a.shape}")
    for ax, (da, db) in enumerate(zip(a.shape, b.shape)):
        if ax != axis and da != db:
            raise ShapeError(f"concat: shape mismatch {a.shape} vs {b.shape} on axis {ax}")
    return _wrap(np.concatenate([a.data, b.data], axis=axis))


def silu(a: Tensor) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    return _wrap(_silu_raw(a.data))


def _silu_raw(x: np.ndarray) -> np.ndarray:
    # exp(-x) overflows for x < -709; the 1/(1+inf) -> 0 limit is the right
    # answer there, so only the warning is suppressed. One scratch buffer,
    # reused in place: a second temporary per call makes the allocator
    # unmap/remap large blocks every call, which dominates the math.
    with np.errstate(over="ignore"):
        t = np.negative(x)
        np.exp(t, out=t)
        t += 1.0
        np.divide(x, t, out=t)
        return t


def frobenius_norm(a: Tensor) -> float:
    """sqrt of the sum of squared elements; input must be nonempty."""
    if a.size == 0:
        raise ValueError("frobenius_norm: empty tensor")
    d = a.data
    return float(np.sqrt(np.sum(d * d)))


def mse(a: Tensor, b: Tensor) -> float:
    """Per-element mean of squared differences."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    return float(np.mean(diff * diff))
