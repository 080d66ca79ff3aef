"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"PSSD"  u32 version  u32 count
    u32 config length, config as UTF-8 JSON
    count x { u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
              prod(dims) x float32 }

Values are stored as float32 and widened back to float64 on load.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .model import DetectorConfig, DetectorParams

MAGIC = b"PSSD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def header_size(config_json: bytes) -> int:
    return 4 + 4 + 4 + 4 + len(config_json)


def record_overhead(name: str, rank: int) -> int:
    return 2 + len(name.encode("utf-8")) + 1 + 4 * rank


def expected_size(params: DetectorParams) -> int:
    """Bytes :func:`dumps` will produce: 4 per value plus headers."""
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    size = header_size(cfg)
    for name, arr in params.arrays.items():
        size += record_overhead(name, arr.ndim) + 4 * arr.size
    return size


def dumps(params: DetectorParams) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(params.arrays)))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> DetectorParams:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", view, 12)
    pos = 16
    cfg = json.loads(bytes(view[pos:pos + cfg_len]).decode("utf-8"))
    pos += cfg_len
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", view, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", view, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).astype(np.float64)
        pos += 4 * n
        arrays[name] = arr.reshape(dims)
    if pos != len(blob):
        raise CheckpointError(f"trailing bytes in checkpoint ({len(blob) - pos})")
    return DetectorParams(DetectorConfig(**cfg), arrays)


def save(path, params: DetectorParams) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> DetectorParams:
    return loads(Path(path).read_bytes())
