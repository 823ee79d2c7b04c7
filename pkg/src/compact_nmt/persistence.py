"""Binary checkpoint (``NMTB``) and offset (``NMTO``) files.

Both formats are little-endian with float32 payloads, and each ends with
the SHA-256 digest of every preceding byte.

Checkpoint::

    b"NMTB" | u32 version | u32 n | n bytes config JSON | u32 tensor count
    per tensor: u16 name length | name (UTF-8) | u8 rank | u32 dims[rank] | f32 payload
    32-byte SHA-256

Offsets::

    b"NMTO" | u32 version | 32-byte baseline checksum | u32 entry count
    per entry: u16 name length | name | u8 kind (0 zero, 1 dense, 2 sparse rows)
      dense:  u8 rank | u32 dims[rank] | f32 payload
      sparse: u8 rank (2) | u32 dims[2] | u32 row count k | u32 row ids[k] | f32 payload (k x width)
      zero:   nothing further
    32-byte SHA-256

The baseline checksum is the trailing digest of the checkpoint the offsets
were trained against.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .adapt import ZERO, Dense, OffsetSet, SparseRows, Zero
from .errors import CompatibilityError, FormatError
from .model import ModelConfig, ParameterSet, param_shapes

CHECKPOINT_MAGIC = b"NMTB"
OFFSET_MAGIC = b"NMTO"
VERSION = 1
DIGEST_BYTES = 32

KIND_ZERO, KIND_DENSE, KIND_SPARSE = 0, 1, 2


def _atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _shape(shape) -> bytes:
    return struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def shape(self) -> tuple[int, ...]:
        (rank,) = self.unpack("<B")
        return tuple(self.unpack(f"<{rank}I"))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)


def _open_checked(data: bytes, magic: bytes, what: str) -> _Reader:
    if len(data) < len(magic) + 4 + DIGEST_BYTES:
        raise FormatError(f"{what} too short ({len(data)} bytes)")
    if data[:4] != magic:
        raise FormatError(f"bad magic {data[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise FormatError(f"unsupported {what} version {version} (expected {VERSION})")
    body, digest = data[:-DIGEST_BYTES], data[-DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{what} checksum mismatch")
    reader = _Reader(body, what)
    reader.pos = 8
    return reader


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParameterSet
    checksum: bytes


def checkpoint_bytes(params: Mapping[str, np.ndarray], config: ModelConfig) -> bytes:
    shapes = param_shapes(config)
    if set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise FormatError(f"parameter names do not match config (missing {missing}, extra {extra})")
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(shapes))]
    for name, shape in shapes.items():
        arr = np.asarray(params[name])
        if arr.shape != shape:
            raise FormatError(f"{name}: shape {arr.shape}, config says {shape}")
        parts += [_name(name), _shape(shape), _f32(arr)]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def checkpoint_checksum(params: Mapping[str, np.ndarray], config: ModelConfig) -> bytes:
    """Digest identifying a baseline, as stored at the end of its checkpoint."""
    return checkpoint_bytes(params, config)[-DIGEST_BYTES:]


def save_checkpoint(path: str | os.PathLike, params: Mapping[str, np.ndarray],
                    config: ModelConfig) -> bytes:
    data = checkpoint_bytes(params, config)
    _atomic_write(path, data)
    return data[-DIGEST_BYTES:]


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _open_checked(data, CHECKPOINT_MAGIC, "checkpoint")
    (n,) = r.unpack("<I")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(n).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable model config: {exc}") from exc
    shapes = param_shapes(config)
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        name = r.name()
        shape = r.shape()
        if shapes.get(name) != shape:
            raise FormatError(f"tensor {name!r} with shape {shape} not in the config's scheme")
        params[name] = r.floats(int(np.prod(shape))).reshape(shape)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last tensor")
    if set(params) != set(shapes):
        raise FormatError(f"checkpoint lacks tensors {sorted(set(shapes) - set(params))}")
    ordered = {name: params[name] for name in shapes}
    return Checkpoint(config, ordered, data[-DIGEST_BYTES:])


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------
# offsets


def offset_bytes(offsets: OffsetSet, baseline_checksum: bytes | None = None) -> bytes:
    checksum = baseline_checksum if baseline_checksum is not None else offsets.baseline_checksum
    if checksum is None or len(checksum) != DIGEST_BYTES:
        raise CompatibilityError("offsets must be bound to a 32-byte baseline checksum")
    parts = [OFFSET_MAGIC, struct.pack("<I", VERSION), checksum,
             struct.pack("<I", len(offsets))]
    for name, entry in offsets.items():
        parts.append(_name(name))
        if isinstance(entry, Zero):
            parts.append(struct.pack("<B", KIND_ZERO))
        elif isinstance(entry, Dense):
            parts += [struct.pack("<B", KIND_DENSE), _shape(entry.shape), _f32(entry.values)]
        elif isinstance(entry, SparseRows):
            ids = entry.row_ids
            parts += [struct.pack("<B", KIND_SPARSE), _shape(entry.shape),
                      struct.pack("<I", len(ids)), np.asarray(ids, dtype="<u4").tobytes(),
                      _f32(entry.rows)]
        else:
            raise TypeError(f"unknown offset entry {entry!r}")
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_offsets(path: str | os.PathLike, offsets: OffsetSet,
                 baseline_checksum: bytes | None = None) -> int:
    """Write ``offsets`` atomically; returns the file size in bytes."""
    data = offset_bytes(offsets, baseline_checksum)
    _atomic_write(path, data)
    return len(data)


def parse_offsets(data: bytes, expected_checksum: bytes | None = None) -> OffsetSet:
    r = _open_checked(data, OFFSET_MAGIC, "offset file")
    checksum = r.take(DIGEST_BYTES)
    if expected_checksum is not None and checksum != expected_checksum:
        raise CompatibilityError("offset file belongs to a different baseline")
    (count,) = r.unpack("<I")
    entries = {}
    for _ in range(count):
        name = r.name()
        (kind,) = r.unpack("<B")
        if kind == KIND_ZERO:
            entries[name] = ZERO
        elif kind == KIND_DENSE:
            shape = r.shape()
            entries[name] = Dense(r.floats(int(np.prod(shape))).reshape(shape))
        elif kind == KIND_SPARSE:
            shape = r.shape()
            if len(shape) != 2:
                raise FormatError(f"{name}: sparse rows need a matrix, got rank {len(shape)}")
            (k,) = r.unpack("<I")
            ids = np.frombuffer(r.take(4 * k), dtype="<u4").astype(np.int64)
            try:
                entries[name] = SparseRows(shape, ids, r.floats(k * shape[1]))
            except ValueError as exc:
                raise FormatError(f"{name}: {exc}") from exc
        else:
            raise FormatError(f"{name}: unknown entry kind {kind}")
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last offset entry")
    return OffsetSet(entries, checksum)


def load_offsets(path: str | os.PathLike, expected_checksum: bytes | None = None) -> OffsetSet:
    return parse_offsets(Path(path).read_bytes(), expected_checksum)
