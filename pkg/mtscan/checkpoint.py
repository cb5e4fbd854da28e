"""
MTKP Checkpoint Codec

Layout (all integers little-endian):
    magic     4 bytes  b"MTKP"
    version   u32      1
    count     u32      number of tensors
    per tensor:
        name_len u16, name (UTF-8)
        dtype    u8    0 = f32, 1 = f64
        ndim     u8
        dims     u32 * ndim
        values   raw little-endian, row-major
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from mtscan.config import Config
from mtscan.errors import CheckpointError

logger = logging.getLogger(Config.LOGGER_NAME)

MAGIC = b"MTKP"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode(tensors: Dict[str, np.ndarray]) -> bytes:
    """
    Serialize named arrays to MTKP bytes

    Args:
        tensors: Name -> f32/f64 array, written in dict order

    Returns:
        Encoded bytes

    Raises:
        CheckpointError: unsupported dtype or oversized name/rank
    """
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        if array.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: dtype {array.dtype} is not f32/f64")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or array.ndim > 0xFF:
            raise CheckpointError(f"{name}: name or rank too large for MTKP")
        code = _DTYPE_CODES[array.dtype]
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=_CODE_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(payload: bytes) -> Dict[str, np.ndarray]:
    """
    Parse MTKP bytes

    Args:
        payload: Encoded checkpoint

    Returns:
        Name -> array (native byte order), in file order

    Raises:
        CheckpointError: bad magic, unknown version/dtype, or truncation
    """
    if payload[:4] != MAGIC:
        raise CheckpointError(f"bad magic {payload[:4]!r}, expected {MAGIC!r}")
    offset = 4

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(payload):
            raise CheckpointError("checkpoint is truncated")
        values = struct.unpack_from(fmt, payload, offset)
        offset += size
        return values

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported MTKP version {version}")

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if offset + name_len > len(payload):
            raise CheckpointError("checkpoint is truncated")
        name = payload[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = take("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = take(f"<{ndim}I") if ndim else ()
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{name}: checkpoint is truncated")
        values = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        tensors[name] = values.reshape(shape).astype(dtype.newbyteorder("="))
        offset += nbytes
    return tensors


def save(path: Union[str, Path], tensors: Dict[str, np.ndarray]) -> Path:
    """Write named arrays to an MTKP file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors))
    logger.debug(f"Saved {len(tensors)} tensors to {path}")
    return path


def load(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """
    Read an MTKP file

    Raises:
        CheckpointError: missing file or malformed content
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
