"""Single-file container of named arrays plus JSON metadata.

Layout (all integers little-endian):

    magic            8 bytes
    version          uint32
    metadata length  uint64, followed by UTF-8 JSON
    array count      uint32
    per array:
        name length  uint16, followed by UTF-8 name
        dtype code   1 byte, b"f" float64 or b"i" int64
        ndim         uint8
        dims         uint64 each
        data         raw little-endian values, C order

The epoch cache and model checkpoints share this layout and differ in
their magic bytes.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

from constants import DTYPE_CODES
from exceptions import FileOperationError, ValidationError

logger = logging.getLogger(__name__)

MAGIC_BYTES = 8


def _dtype_code(name: str, array: np.ndarray) -> str:
    if np.issubdtype(array.dtype, np.floating):
        return "f"
    if np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_:
        return "i"
    raise ValidationError("array", name, f"unsupported dtype {array.dtype}")


def encode_archive(
    magic: bytes,
    version: int,
    metadata: Mapping[str, Any],
    arrays: Mapping[str, np.ndarray]
) -> bytes:
    """Serialize metadata and arrays; arrays are written in sorted name order."""
    if len(magic) != MAGIC_BYTES:
        raise ValidationError("magic", magic, f"must be {MAGIC_BYTES} bytes")
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<I", version), struct.pack("<Q", len(meta)), meta]
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        array = np.asarray(arrays[name])
        code = _dtype_code(name, array)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(code.encode("ascii") + struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    """Cursor over archive bytes that reports where it ran out."""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.source = source
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FileOperationError("read", self.source, f"archive truncated at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_archive(
    data: bytes,
    magic: bytes,
    version: int,
    source: str = "<bytes>"
) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Parse archive bytes written by encode_archive.

    Raises:
        FileOperationError: On wrong magic, version mismatch or truncation
    """
    reader = _Reader(data, source)
    found = reader.take(MAGIC_BYTES)
    if found != magic:
        raise FileOperationError("read", source, f"unexpected magic {found!r}, expected {magic!r}")
    (found_version,) = reader.unpack("<I")
    if found_version != version:
        raise FileOperationError("read", source, f"format version {found_version}, expected {version}")
    (meta_len,) = reader.unpack("<Q")
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FileOperationError("read", source, f"corrupt metadata: {e}") from e

    arrays: Dict[str, np.ndarray] = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code = reader.take(1).decode("ascii", errors="replace")
        if code not in DTYPE_CODES:
            raise FileOperationError("read", source, f"unknown dtype code {code!r} for '{name}'")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}Q")
        dtype = np.dtype(DTYPE_CODES[code])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(reader.take(n_bytes), dtype=dtype).reshape(shape).copy()
    if reader.offset != len(data):
        logger.warning(f"{source}: {len(data) - reader.offset} unexpected trailing bytes")
    return metadata, arrays


def write_archive(
    path: Union[str, Path],
    magic: bytes,
    version: int,
    metadata: Mapping[str, Any],
    arrays: Mapping[str, np.ndarray]
) -> Path:
    """Write an archive file, creating parent directories.

    Raises:
        FileOperationError: If the file cannot be written
    """
    path = Path(path)
    payload = encode_archive(magic, version, metadata, arrays)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise FileOperationError("write", str(path), str(e)) from e
    logger.debug(f"Wrote {len(arrays)} arrays ({len(payload)} bytes) to {path}")
    return path


def read_archive(
    path: Union[str, Path],
    magic: bytes,
    version: int
) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Read an archive file.

    Raises:
        FileOperationError: If the file is unreadable or malformed
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FileOperationError("read", str(path), str(e)) from e
    return decode_archive(data, magic, version, str(path))
