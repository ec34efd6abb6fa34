"""Dense immutable N-dimensional tensors and the primitives everything else builds on.

Storage is a read-only row-major numpy array. Every operation returns a new Tensor.
"""

import numpy as np
from typing import Any, Optional, Sequence, Tuple

from tncompress.errors import ShapeError
from tncompress.models import DType

NUMPY_DTYPES = {DType.F32: np.float32, DType.F64: np.float64}


def numpy_dtype(dtype: DType) -> type:
    return NUMPY_DTYPES[DType(dtype)]


def to_dtype(array: np.ndarray) -> DType:
    if array.dtype == np.float32:
        return DType.F32
    if array.dtype == np.float64:
        return DType.F64
    raise TypeError(f"Unsupported tensor dtype {array.dtype}")


class Tensor:
    """Immutable dense real tensor (f32 or f64)"""

    __slots__ = ("_array",)

    def __init__(self, data: Any, dtype: Optional[DType] = None):
        if dtype is None:
            source = np.asarray(data)
            dtype = DType.F32 if source.dtype == np.float32 else DType.F64
        array = np.array(data, dtype=numpy_dtype(dtype), copy=True, order="C")
        array.flags.writeable = False
        self._array = array

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying. The caller must not keep writing to it."""
        array = np.asarray(array)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float64)
        if not array.flags.c_contiguous:
            array = array.copy(order="C")
        array.flags.writeable = False
        tensor = cls.__new__(cls)
        tensor._array = array
        return tensor

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype: DType = DType.F64) -> "Tensor":
        return cls.wrap(np.zeros(tuple(shape), dtype=numpy_dtype(dtype)))

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._array.shape

    @property
    def order(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def dtype(self) -> DType:
        return to_dtype(self._array)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view"""
        return self._array.reshape(-1)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-entry tensor, got shape {list(self.shape)}")
        return float(self._array.reshape(-1)[0])

    def astype(self, dtype: DType) -> "Tensor":
        if self.dtype == dtype:
            return self
        return Tensor.wrap(self._array.astype(numpy_dtype(dtype)))

    def bitwise_equal(self, other: "Tensor") -> bool:
        return (
            self.shape == other.shape
            and self._array.dtype == other._array.dtype
            and self._array.tobytes() == other._array.tobytes()
        )

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.value})"


def _check_axes(name: str, axes: Sequence[int], order: int) -> None:
    for axis in axes:
        if not 0 <= axis < order:
            raise ShapeError(f"Axis {axis} of {name} out of range for order {order}")
    if len(set(axes)) != len(axes):
        raise ShapeError(f"Duplicate axes for {name}: {list(axes)}")


def contract(a: Tensor, b: Tensor, axes_a: Sequence[int], axes_b: Sequence[int]) -> Tensor:
    """Sum over paired indexes of a and b (generalized tensordot).

    Result indexes: uncontracted indexes of a in order, then those of b.
    """
    axes_a, axes_b = list(axes_a), list(axes_b)
    if len(axes_a) != len(axes_b):
        raise ShapeError(f"Contracting {len(axes_a)} axes of a with {len(axes_b)} axes of b")
    _check_axes("a", axes_a, a.order)
    _check_axes("b", axes_b, b.order)
    for axis_a, axis_b in zip(axes_a, axes_b):
        if a.shape[axis_a] != b.shape[axis_b]:
            raise ShapeError(
                f"Dimension mismatch on axis pair ({axis_a}, {axis_b}): "
                f"{a.shape[axis_a]} != {b.shape[axis_b]}"
            )
    return Tensor.wrap(np.tensordot(a.array, b.array, axes=(axes_a, axes_b)))


def reshape(t: Tensor, new_shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(dim) for dim in new_shape)
    if any(dim < 1 for dim in new_shape):
        raise ShapeError(f"Shape entries must be positive, got {list(new_shape)}")
    if int(np.prod(new_shape, dtype=np.int64)) != t.size:
        raise ShapeError(f"Cannot reshape {list(t.shape)} ({t.size} entries) to {list(new_shape)}")
    return Tensor.wrap(t.array.reshape(new_shape))


def permute(t: Tensor, perm: Sequence[int]) -> Tensor:
    perm = [int(axis) for axis in perm]
    if sorted(perm) != list(range(t.order)):
        raise ShapeError(f"{perm} is not a permutation of 0..{t.order - 1}")
    return Tensor.wrap(np.transpose(t.array, perm))


def inverse_permutation(perm: Sequence[int]) -> list:
    return [int(axis) for axis in np.argsort(perm)]


def relu(t: Tensor) -> Tensor:
    return Tensor.wrap(np.maximum(t.array, 0))


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return Tensor.wrap(a.array + b.array)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return Tensor.wrap(a.array - b.array)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return Tensor.wrap(a.array * b.array)


def scale(t: Tensor, factor: float) -> Tensor:
    return Tensor.wrap(t.array * t.array.dtype.type(factor))


def norm2(t: Tensor) -> float:
    """Euclidean norm over all entries"""
    return float(np.linalg.norm(t.array.reshape(-1)))


def sum_all(t: Tensor) -> Tensor:
    return Tensor.wrap(np.asarray(t.array.sum(), dtype=t.array.dtype))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate the flat views of order-1 (or any-order) tensors"""
    return Tensor.wrap(np.concatenate([t.data for t in tensors]))


def outer(a: Tensor, b: Tensor) -> Tensor:
    return contract(a, b, [], [])
