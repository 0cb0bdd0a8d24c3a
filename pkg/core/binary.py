"""
Binary tensor conventions shared by containers, snapshots and the wire protocol.

Tensors are stored little-endian, row-major. Blobs inside files start on
64-byte boundaries.
"""

import math
from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from config.settings import BLOB_ALIGNMENT
from core.errors import ContractViolation


@dataclass(frozen=True)
class DTypeInfo:
    """
    One supported element type.

    Attributes:
        name: Short name used in JSON headers ("f64", ...)
        numpy: Little-endian numpy dtype
        wire_code: Byte code used by the batch-server protocol
    """
    name: str
    numpy: np.dtype
    wire_code: int

    @property
    def itemsize(self) -> int:
        return self.numpy.itemsize


DTYPES: Dict[str, DTypeInfo] = {
    "f32": DTypeInfo("f32", np.dtype("<f4"), 0x01),
    "f64": DTypeInfo("f64", np.dtype("<f8"), 0x02),
    "i32": DTypeInfo("i32", np.dtype("<i4"), 0x03),
    "i64": DTypeInfo("i64", np.dtype("<i8"), 0x04),
    "u8": DTypeInfo("u8", np.dtype("u1"), 0x05),
}

DTYPES_BY_CODE: Dict[int, DTypeInfo] = {info.wire_code: info for info in DTYPES.values()}


def dtype_info(name: str) -> DTypeInfo:
    try:
        return DTYPES[name]
    except KeyError:
        raise ContractViolation(
            f"unsupported dtype {name!r}; expected one of {sorted(DTYPES)}"
        ) from None


def dtype_name_of(array: np.ndarray) -> str:
    """Short dtype name of a numpy array, ignoring byte order."""
    for info in DTYPES.values():
        if array.dtype.kind == info.numpy.kind and array.dtype.itemsize == info.itemsize:
            return info.name
    raise ContractViolation(f"unsupported array dtype {array.dtype}")


def align(offset: int, alignment: int = BLOB_ALIGNMENT) -> int:
    """Round offset up to the next multiple of alignment."""
    return (offset + alignment - 1) // alignment * alignment


def num_bytes(shape: Sequence[int], dtype: str) -> int:
    """Exact byte size; Python ints, so absurd dims give huge sizes instead of wrapping."""
    return math.prod(int(d) for d in shape) * dtype_info(dtype).itemsize


def tensor_to_bytes(array: np.ndarray, dtype: str) -> bytes:
    """Little-endian row-major encoding of array as dtype."""
    info = dtype_info(dtype)
    return np.ascontiguousarray(array, dtype=info.numpy).tobytes(order="C")


def tensor_from_bytes(payload: bytes, dtype: str, shape: Sequence[int]) -> np.ndarray:
    """Decode a little-endian blob into a native-order array of the given shape."""
    info = dtype_info(dtype)
    expected = num_bytes(shape, dtype)
    if len(payload) != expected:
        raise ContractViolation(
            f"blob has {len(payload)} bytes, shape {list(shape)} {dtype} needs {expected}"
        )
    array = np.frombuffer(payload, dtype=info.numpy).reshape(tuple(shape))
    return array.astype(info.numpy.newbyteorder("="), copy=True)
