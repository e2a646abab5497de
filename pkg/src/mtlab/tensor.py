"""Dense tensor carrier, precision modes and the TNS1 binary container."""
from __future__ import annotations

import enum
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNS1"


class Precision(enum.Enum):
    TRAIN32 = "train32"
    CHECK64 = "check64"

    @property
    def dtype(self):
        return np.float32 if self is Precision.TRAIN32 else np.float64


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Row-major dense array with an optional gradient buffer.

    Thin wrapper over a numpy array: ``data`` is always a contiguous
    ndarray whose size equals ``prod(shape)``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, grad=None, dtype=None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        if arr.dtype.kind in "fc" and not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        if grad is not None:
            grad = np.asarray(grad)
            if grad.shape != arr.shape:
                raise ValueError(f"grad shape {grad.shape} != data shape {arr.shape}")
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


def encode_tns(array) -> bytes:
    arr = np.asarray(array)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tns(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ValueError(f"{source}: not a TNS1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    head = 8 + 4 * rank
    if len(blob) < head:
        raise ValueError(f"{source}: truncated TNS1 header")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != head + 4 * count:
        raise ValueError(f"{source}: truncated or oversized TNS1 payload "
                         f"(expected {head + 4 * count} bytes, got {len(blob)})")
    return np.frombuffer(blob, dtype="<f4", offset=head, count=count).reshape(dims).astype(np.float32)


def write_tns(path, array) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tns(array))
    os.replace(tmp, path)


def read_tns(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ValueError(f"{path}: cannot read tensor file ({exc})") from exc
    return decode_tns(blob, str(path))
