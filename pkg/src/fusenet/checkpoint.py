"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"FUSENET\\0"                  8-byte magic
    u32 version                    currently 1
    u32 n, n bytes                 JSON config block (sorted keys, UTF-8)
    u32 count                      number of tensor records
    count x record:
        u32 n, n bytes             parameter path (UTF-8)
        u8 precision               0 = float32, 1 = float64
        u32 rank, rank x u64 dims
        payload                    little-endian values, row-major
    u32 crc32                      of every preceding byte, magic included

The JSON block carries ``{"model": ..., "metadata": ...}``. Serialization is
canonical, so save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import CheckpointError

MAGIC = b"FUSENET\0"
VERSION = 1
_PRECISION_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    """Model configuration, named parameter arrays and training metadata."""

    config: dict
    params: "OrderedDict[str, np.ndarray]"
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, metadata: Optional[dict] = None) -> "Checkpoint":
        return cls(model.config(), model.state_dict(), dict(metadata or {}))

    def build_model(self):
        from .fusion import FusionModel

        model = FusionModel.from_config(self.config)
        model.load_state_dict(self.params)
        return model

    def to_bytes(self) -> bytes:
        return dumps(self)


def dumps(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    block = json.dumps({"model": ckpt.config, "metadata": ckpt.metadata}, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(block)) + block
    out += struct.pack("<I", len(ckpt.params))
    for path, value in ckpt.params.items():
        arr = np.asarray(value)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _PRECISION_TAGS:
            raise CheckpointError(f"parameter {path}: unsupported dtype {arr.dtype}")
        name = path.encode("utf-8")
        out += struct.pack("<I", len(name)) + name
        out += struct.pack("<BI", _PRECISION_TAGS[dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=dtype).tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def loads(data: bytes) -> Checkpoint:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {data[:len(MAGIC)]!r}; not a fusenet checkpoint")
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError("checkpoint truncated")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    (n,) = r.unpack("<I")
    try:
        block = json.loads(r.take(n).decode("utf-8"))
        config, metadata = block["model"], block["metadata"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"malformed config block: {exc}") from None
    (count,) = r.unpack("<I")
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (plen,) = r.unpack("<I")
        path = r.take(plen).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"parameter {path}: unknown precision tag {tag}")
        dims = r.unpack(f"<{rank}Q")
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        params[path] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} unexpected trailing bytes in checkpoint")
    return Checkpoint(config, params, metadata)


def save_checkpoint(model_or_ckpt, path, metadata: Optional[dict] = None) -> None:
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else Checkpoint.from_model(model_or_ckpt, metadata)
    if metadata is not None and isinstance(model_or_ckpt, Checkpoint):
        ckpt = Checkpoint(ckpt.config, ckpt.params, dict(metadata))
    Path(path).write_bytes(dumps(ckpt))


def read_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return loads(data)


def load_checkpoint(path, model=None) -> Tuple[object, Dict]:
    """Return ``(model, metadata)``.

    Without ``model`` one is built from the stored configuration; with it,
    the stored parameters are loaded into that model, which fails on any
    key or shape mismatch.
    """
    ckpt = read_checkpoint(path)
    if model is None:
        return ckpt.build_model(), ckpt.metadata
    model.load_state_dict(ckpt.params)
    return model, ckpt.metadata
