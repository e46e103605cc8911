#!/usr/bin/env python3

"""
Binary checkpoint format for ViTWeights.

Layout (all integers little-endian):
    magic      4 bytes  b"SPTN"
    version    u32
    count      u32
    count x tensor header:
        name length u32, UTF-8 name, rank u32, rank x u64 dims,
        dtype code u8 (0 = float32), frozen flag u8
    payloads   float32 row-major, in header order

The frozen flag of every tensor is stored so the freezing rule can be audited
after training.
"""

import logging
import os
import struct
from dataclasses import dataclass
from typing import ClassVar, Dict, List, Tuple

import numpy as np

from config import ConfigError
from metrics import record_checkpoint_written
from vit_backbone import SparsePlan, ViTConfig, ViTWeights

logger = logging.getLogger(__name__)

MAGIC = b"SPTN"
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4")}
PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be written or parsed"""

    pass


@dataclass(frozen=True)
class TensorEntry:
    name: str
    shape: Tuple[int, ...]
    frozen: bool
    dtype_code: int = 0

    u32: ClassVar[struct.Struct] = struct.Struct("<I")
    u64: ClassVar[struct.Struct] = struct.Struct("<Q")
    flags: ClassVar[struct.Struct] = struct.Struct("<BB")  # dtype code, frozen

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def payload_bytes(self) -> int:
        return self.size * DTYPE_CODES[self.dtype_code].itemsize

    def to_bytes(self) -> bytes:
        name = self.name.encode("utf-8")
        parts = [self.u32.pack(len(name)), name, self.u32.pack(len(self.shape))]
        parts.extend(self.u64.pack(dim) for dim in self.shape)
        parts.append(self.flags.pack(self.dtype_code, int(self.frozen)))
        return b"".join(parts)


class _Reader:
    """Bounds-checked cursor over the checkpoint bytes."""

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.offset = 0

    def take(self, size: int, what: str) -> memoryview:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointError(
                f"Truncated checkpoint: needed {size} bytes for {what} at offset {self.offset}, "
                f"only {len(self.data) - self.offset} left"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> Tuple:
        return fmt.unpack(self.take(fmt.size, what))


@dataclass(frozen=True)
class _FileHeader:
    format: ClassVar[struct.Struct] = struct.Struct(
        "<"
        "4s"  # magic
        "I"  # format version
        "I"  # tensor count
    )
    version: int
    count: int

    def to_bytes(self) -> bytes:
        return self.format.pack(MAGIC, self.version, self.count)

    @classmethod
    def read(cls, reader: _Reader) -> "_FileHeader":
        magic, version, count = reader.unpack(cls.format, "file header")
        if magic != MAGIC:
            raise CheckpointError(f"Not a checkpoint: magic {bytes(magic)!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"Unsupported checkpoint version {version}; this build reads version {FORMAT_VERSION}"
            )
        return cls(version=version, count=count)


def encode_checkpoint(weights: ViTWeights) -> bytes:
    """Serialize every parameter of `weights` in declaration order."""
    entries: List[TensorEntry] = []
    payloads: List[bytes] = []
    for name, tensor in weights.items():
        entries.append(TensorEntry(name=name, shape=tuple(tensor.shape), frozen=weights.is_frozen(name)))
        payloads.append(np.ascontiguousarray(tensor.data, dtype=PAYLOAD_DTYPE).tobytes())
    header = _FileHeader(version=FORMAT_VERSION, count=len(entries)).to_bytes()
    return header + b"".join(e.to_bytes() for e in entries) + b"".join(payloads)


def decode_checkpoint(data: bytes) -> Dict[str, Tuple[np.ndarray, bool]]:
    """
    Parse checkpoint bytes into {name: (array, frozen)} in file order.

    Raises:
        CheckpointError: On bad magic, unsupported version, unknown dtype,
            duplicate names, truncation or trailing bytes
    """
    reader = _Reader(data)
    header = _FileHeader.read(reader)

    entries: List[TensorEntry] = []
    seen = set()
    for index in range(header.count):
        (name_len,) = reader.unpack(TensorEntry.u32, f"name length of tensor {index}")
        try:
            name = bytes(reader.take(name_len, f"name of tensor {index}")).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"Tensor {index} has a name that is not UTF-8: {e}")
        if name in seen:
            raise CheckpointError(f"Duplicate tensor name {name!r}")
        seen.add(name)
        (rank,) = reader.unpack(TensorEntry.u32, f"rank of {name}")
        shape = tuple(reader.unpack(TensorEntry.u64, f"dims of {name}")[0] for _ in range(rank))
        dtype_code, frozen = reader.unpack(TensorEntry.flags, f"flags of {name}")
        if dtype_code not in DTYPE_CODES:
            raise CheckpointError(f"Tensor {name!r} has unknown dtype code {dtype_code}")
        if frozen not in (0, 1):
            raise CheckpointError(f"Tensor {name!r} has invalid frozen flag {frozen}")
        entries.append(TensorEntry(name=name, shape=shape, frozen=bool(frozen), dtype_code=dtype_code))

    arrays: Dict[str, Tuple[np.ndarray, bool]] = {}
    for entry in entries:
        chunk = reader.take(entry.payload_bytes, f"payload of {entry.name}")
        array = np.frombuffer(chunk, dtype=DTYPE_CODES[entry.dtype_code]).reshape(entry.shape)
        arrays[entry.name] = (array.astype(np.float32), entry.frozen)

    if reader.offset != len(reader.data):
        raise CheckpointError(f"{len(reader.data) - reader.offset} trailing bytes after the last payload")
    return arrays


def save_checkpoint(weights: ViTWeights, path: str) -> int:
    """Write a checkpoint file atomically; returns the number of bytes written."""
    data = encode_checkpoint(weights)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    try:
        with open(tmp_path, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}")
    record_checkpoint_written()
    logger.info(f"Wrote checkpoint {path} ({len(weights)} tensors, {len(data):,} bytes)")
    return len(data)


def load_checkpoint(path: str, config: ViTConfig, plan: SparsePlan) -> ViTWeights:
    """
    Read a checkpoint and bind it to an architecture and plan.

    Raises:
        CheckpointError: If the file is unreadable, malformed, or does not match the plan
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    arrays = decode_checkpoint(data)
    try:
        weights = ViTWeights.from_arrays(config, plan, arrays)
    except ConfigError as e:
        raise CheckpointError(f"Checkpoint {path} does not match the configured model: {e}")
    logger.info(f"Loaded checkpoint {path} ({len(arrays)} tensors)")
    return weights
