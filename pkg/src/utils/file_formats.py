"""
On-disk formats.

Embedding file (little-endian):
    magic   4s   b"NIDE"
    version u16  1
    kind    u16  0 = embedding, 1 = token_grid
    count   u32
    dim     u32
    extra   u32  tokens per grid (0 for embeddings)
    payload count * dim * max(extra, 1) float32, row-major
    footer  u64  blake2b-64 checksum of the payload bytes

Head checkpoint (little-endian):
    magic   4s   b"NIDH"
    version u16  1
    D, H, d_out, T  4 x u32
    blocks  float64 parameter arrays in HeadParams.BLOCK_ORDER, each flattened row-major
    footer  u64  blake2b-64 checksum of everything before it
"""
import hashlib
import logging
import os
import struct
import tempfile
from typing import Dict, Tuple

import numpy as np

from ..models.errors import FileFormatError

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"NIDE"
CHECKPOINT_MAGIC = b"NIDH"
FORMAT_VERSION = 1
KIND_EMBEDDING = 0
KIND_TOKEN_GRID = 1

_EMBEDDING_HEADER = struct.Struct("<4sHHIII")
_CHECKPOINT_HEADER = struct.Struct("<4sHIIII")
_FOOTER = struct.Struct("<Q")


def checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over the target."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp_", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_embeddings(array: np.ndarray) -> bytes:
    """Serialize an (count, dim) embedding matrix or a (count, tokens, dim) grid stack."""
    array = np.asarray(array)
    if array.ndim == 2:
        kind, (count, dim), extra = KIND_EMBEDDING, array.shape, 0
    elif array.ndim == 3:
        kind, count, extra, dim = KIND_TOKEN_GRID, array.shape[0], array.shape[1], array.shape[2]
    else:
        raise FileFormatError(f"Expected a 2-D or 3-D array, got shape {array.shape}")
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    header = _EMBEDDING_HEADER.pack(EMBEDDING_MAGIC, FORMAT_VERSION, kind, count, dim, extra)
    return header + payload + _FOOTER.pack(checksum64(payload))


def decode_embeddings(data: bytes) -> np.ndarray:
    if len(data) < _EMBEDDING_HEADER.size + _FOOTER.size:
        raise FileFormatError("Embedding file is truncated")
    magic, version, kind, count, dim, extra = _EMBEDDING_HEADER.unpack_from(data, 0)
    if magic != EMBEDDING_MAGIC:
        raise FileFormatError(f"Bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FileFormatError(f"Unsupported embedding file version {version}")
    if kind not in (KIND_EMBEDDING, KIND_TOKEN_GRID):
        raise FileFormatError(f"Unknown payload kind {kind}")
    n_values = count * dim * max(extra, 1)
    start = _EMBEDDING_HEADER.size
    end = start + n_values * 4
    if len(data) != end + _FOOTER.size:
        raise FileFormatError(
            f"Payload length mismatch: expected {n_values * 4} bytes, file holds {len(data) - start - _FOOTER.size}"
        )
    payload = data[start:end]
    (stored,) = _FOOTER.unpack_from(data, end)
    if stored != checksum64(payload):
        raise FileFormatError("Checksum mismatch")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if kind == KIND_EMBEDDING:
        return values.reshape(count, dim)
    return values.reshape(count, extra, dim)


def write_embeddings(path: str, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_embeddings(array))


def read_embeddings(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_embeddings(f.read())


def encode_checkpoint(dims: Tuple[int, int, int, int], blocks: Dict[str, np.ndarray], order: Tuple[str, ...]) -> bytes:
    D, H, d_out, T = dims
    parts = [_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, D, H, d_out, T)]
    for name in order:
        parts.append(np.ascontiguousarray(blocks[name], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + _FOOTER.pack(checksum64(body))


def decode_checkpoint(data: bytes) -> Tuple[Tuple[int, int, int, int], bytes]:
    """Validate a checkpoint and return its dims plus the raw block bytes."""
    if len(data) < _CHECKPOINT_HEADER.size + _FOOTER.size:
        raise FileFormatError("Checkpoint is truncated")
    magic, version, D, H, d_out, T = _CHECKPOINT_HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FileFormatError(f"Bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FileFormatError(f"Unsupported checkpoint version {version}")
    body = data[:-_FOOTER.size]
    (stored,) = _FOOTER.unpack_from(data, len(data) - _FOOTER.size)
    if stored != checksum64(body):
        raise FileFormatError("Checkpoint checksum mismatch")
    return (D, H, d_out, T), body[_CHECKPOINT_HEADER.size:]
