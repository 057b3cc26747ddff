"""Dense tensor primitives.

Tensors are plain ``numpy.ndarray`` values in row-major order. Image
tensors always use N-H-W-C layout. The helpers here add the shape checks
and error reporting the rest of the engine relies on; they never broadcast
beyond scalar-with-tensor.
"""

import io
import struct

import numpy as np

from .errors import DomainError, ShapeError

DEFAULT_DTYPE = np.float64

_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def as_tensor(values, dtype=DEFAULT_DTYPE):
    arr = np.ascontiguousarray(values, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
    return arr


def _check_same_shape(a, b):
    if np.ndim(a) == 0 or np.ndim(b) == 0:
        return
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def elementwise(a, b, op):
    """Apply ``op`` in {add, sub, mul, div} elementwise.

    Either operand may be a Python scalar; otherwise the shapes must match
    exactly.
    """
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op!r}") from None
    a = a if np.isscalar(a) else np.asarray(a)
    b = b if np.isscalar(b) else np.asarray(b)
    _check_same_shape(a, b)
    if op == "div" and np.any(np.asarray(b) == 0):
        raise DomainError("division by zero")
    return fn(a, b)


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(a, axes=None, op="sum", keepdims=False):
    a = np.asarray(a)
    axes = _normalize_axes(axes, a.ndim)
    if op == "sum":
        out = np.sum(a, axis=axes, keepdims=keepdims)
    elif op == "max":
        out = np.max(a, axis=axes, keepdims=keepdims)
    elif op == "mean":
        out = np.mean(a, axis=axes, keepdims=keepdims)
    else:
        raise DomainError(f"unknown reduction {op!r}")
    return np.asarray(out).reshape(np.shape(out) or (1,))


def reshape(a, shape):
    a = np.asarray(a)
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != a.size or any(d < 1 for d in shape):
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    return a.reshape(shape)


def transpose(a, axes=None):
    a = np.asarray(a)
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    return np.ascontiguousarray(np.transpose(a, axes))


def concat(tensors, axis=-1):
    """Concatenate along ``axis``; all other dimensions must agree."""
    tensors = [np.asarray(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    first = tensors[0]
    ax = _normalize_axes(axis, first.ndim)[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim:
            raise ShapeError(f"concat rank mismatch: {first.shape} vs {t.shape}")
        for d in range(first.ndim):
            if d != ax and t.shape[d] != first.shape[d]:
                raise ShapeError(
                    f"concat shapes disagree off axis {ax}: {first.shape} vs {t.shape}"
                )
    if len(tensors) == 1:
        return first
    return np.concatenate(tensors, axis=ax)


# -- serialization ----------------------------------------------------------
# 1 byte rank, rank x u64 LE dims, then f64 LE elements.


def write_tensor(stream, a):
    a = np.asarray(a)
    if a.ndim < 1 or a.ndim > 255:
        raise ShapeError(f"cannot serialize rank {a.ndim}")
    stream.write(struct.pack("<B", a.ndim))
    stream.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    stream.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_tensor(stream):
    head = stream.read(1)
    if len(head) != 1:
        raise EOFError("no tensor header")
    (rank,) = struct.unpack("<B", head)
    raw = stream.read(8 * rank)
    if len(raw) != 8 * rank:
        raise EOFError("truncated tensor shape")
    shape = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(shape))
    body = stream.read(8 * count)
    if len(body) != 8 * count:
        raise EOFError("truncated tensor data")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_to_bytes(a):
    buf = io.BytesIO()
    write_tensor(buf, a)
    return buf.getvalue()


def tensor_from_bytes(data):
    return read_tensor(io.BytesIO(data))
