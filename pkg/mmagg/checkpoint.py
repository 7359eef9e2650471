"""Binary tensor-table codec shared by checkpoints and preprocessing models.

Layout (little-endian)::

    magic "MMCK" | version u32 | tensor count u64
    per tensor: name length u16 | name bytes (utf-8) | dtype u8 | rank u32 | dims u64 * rank | payload

Tensors are written in mapping order and read back in file order, so
save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .const import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, TENSOR_DTYPE_F32, TENSOR_DTYPE_F64, TENSOR_DTYPE_U8
from .exceptions import CheckpointError

_LOGGER = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sIQ")
_NAME_LEN = struct.Struct("<H")
_TENSOR_INFO = struct.Struct("<BI")
_DIM = struct.Struct("<Q")

_DTYPES: Dict[int, np.dtype] = {
    TENSOR_DTYPE_F32: np.dtype("<f4"),
    TENSOR_DTYPE_F64: np.dtype("<f8"),
    TENSOR_DTYPE_U8: np.dtype("u1"),
}

PathLike = Union[str, Path]


def _dtype_code(array: np.ndarray) -> int:
    """Return the table dtype code for an array."""
    if array.dtype == np.float32:
        return TENSOR_DTYPE_F32
    if array.dtype == np.float64:
        return TENSOR_DTYPE_F64
    if array.dtype == np.uint8:
        return TENSOR_DTYPE_U8
    raise CheckpointError(f"Unsupported tensor dtype {array.dtype}")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Encode a name -> array mapping into the tensor-table byte format."""
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(tensors))]
    for name, tensor in tensors.items():
        array = np.asarray(tensor)
        code = _dtype_code(array)
        encoded_name = name.encode("utf-8")
        if len(encoded_name) > 0xFFFF:
            raise CheckpointError(f"Tensor name too long: {name[:40]}...")
        parts.append(_NAME_LEN.pack(len(encoded_name)))
        parts.append(encoded_name)
        parts.append(_TENSOR_INFO.pack(code, array.ndim))
        parts.extend(_DIM.pack(dim) for dim in array.shape)
        parts.append(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_tensors(payload: bytes) -> Dict[str, np.ndarray]:
    """Decode tensor-table bytes into an ordered name -> array mapping."""
    try:
        magic, version, count = _HEADER.unpack_from(payload, 0)
    except struct.error as err:
        raise CheckpointError("Checkpoint header truncated") from err
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")

    offset = _HEADER.size
    tensors: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = _NAME_LEN.unpack_from(payload, offset)
            offset += _NAME_LEN.size
            name = payload[offset : offset + name_len].decode("utf-8")
            offset += name_len
            code, rank = _TENSOR_INFO.unpack_from(payload, offset)
            offset += _TENSOR_INFO.size
            shape = []
            for _ in range(rank):
                (dim,) = _DIM.unpack_from(payload, offset)
                shape.append(dim)
                offset += _DIM.size
            if code not in _DTYPES:
                raise CheckpointError(f"Tensor {name!r} has unknown dtype code {code}")
            dtype = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = size * dtype.itemsize
            if offset + nbytes > len(payload):
                raise CheckpointError(f"Tensor {name!r} payload truncated")
            array = np.frombuffer(payload, dtype=dtype, count=size, offset=offset).reshape(shape)
            offset += nbytes
            if name in tensors:
                raise CheckpointError(f"Duplicate tensor name {name!r}")
            tensors[name] = array.astype(dtype.newbyteorder("="), copy=True)
    except (struct.error, UnicodeDecodeError) as err:
        raise CheckpointError(f"Checkpoint truncated or corrupt: {err}") from err

    if offset != len(payload):
        raise CheckpointError(f"Checkpoint has {len(payload) - offset} trailing bytes")
    return tensors


def write_tensors(path: PathLike, tensors: Mapping[str, np.ndarray]) -> str:
    """Write a tensor table to ``path`` and return the SHA-256 digest of its bytes."""
    payload = encode_tensors(tensors)
    try:
        Path(path).write_bytes(payload)
    except OSError as err:
        raise CheckpointError(f"Cannot write checkpoint {path}: {err}") from err
    digest = hashlib.sha256(payload).hexdigest()
    _LOGGER.debug("Wrote %d tensors to %s (sha256 %s)", len(tensors), path, digest)
    return digest


def read_tensors(path: PathLike) -> Dict[str, np.ndarray]:
    """Read a tensor table from ``path``."""
    try:
        payload = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"Cannot read checkpoint {path}: {err}") from err
    return decode_tensors(payload)


def file_digest(path: PathLike) -> str:
    """Return the SHA-256 hex digest of a file."""
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as err:
        raise CheckpointError(f"Cannot read {path}: {err}") from err
