"""
S2TF tensor container.

Layout (all integers little-endian):
    magic b"S2TF" | version u16 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | extents u32 * rank | float32 payload
"""

import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from ..errors import TensorFileError

MAGIC = b"S2TF"
VERSION = 1
_PAYLOAD = np.dtype("<f4")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, value in tensors.items():
        array = np.ascontiguousarray(np.asarray(value), dtype=_PAYLOAD)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise TensorFileError(f"entry name too long: {name[:40]}...", offset=sum(map(len, chunks)))
        if array.ndim > 0xFF:
            raise TensorFileError(f"entry {name} has rank {array.ndim}", offset=sum(map(len, chunks)))
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_tensors(blob: bytes) -> Dict[str, np.ndarray]:
    offset = 0

    def take(size: int, what: str) -> bytes:
        nonlocal offset
        if offset + size > len(blob):
            raise TensorFileError(f"truncated {what}: need {size} bytes, {len(blob) - offset} left", offset=offset)
        chunk = blob[offset:offset + size]
        offset += size
        return chunk

    if take(4, "magic") != MAGIC:
        raise TensorFileError("bad magic, not an S2TF container", offset=0)
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise TensorFileError(f"unsupported S2TF version {version}", offset=4)

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name_offset = offset
        try:
            name = take(name_len, "entry name").decode("utf-8")
        except UnicodeDecodeError:
            raise TensorFileError("entry name is not valid UTF-8", offset=name_offset)
        if name in tensors:
            raise TensorFileError(f"duplicate entry name {name}", offset=name_offset)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        size = int(np.prod(shape, dtype=np.int64))
        payload = take(size * _PAYLOAD.itemsize, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype=_PAYLOAD).reshape(shape).astype(np.float32)
    if offset != len(blob):
        raise TensorFileError(f"{len(blob) - offset} trailing bytes after last entry", offset=offset)
    return tensors


def tensor_file_write(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> None:
    if not str(path):
        raise TensorFileError("empty output path", offset=0)
    blob = encode_tensors(tensors)
    with open(path, "wb") as f:
        f.write(blob)


def tensor_file_read(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_tensors(f.read())
