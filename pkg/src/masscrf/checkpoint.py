"""Binary checkpoint container.

Layout (little-endian)::

    b"MASSCRF"  u32 version  u32 record_count
    record*: u16 name_len, name (utf-8), u8 dtype_tag, u8 ndim, u64 dims[ndim], payload

dtype tag 0 is a raw float64 array; tag 1 is a utf-8 JSON document stored as a
1-d byte vector (used for the config snapshot, epoch counter and RNG state).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UnreadableFile

MAGIC = b"MASSCRF"
VERSION = 1
TAG_F64 = 0
TAG_JSON = 1
META_KEY = "__meta__"


@dataclass
class Checkpoint:
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> dict:
        return self.meta.get("train_config", {})

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(dumps(self))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise UnreadableFile(f"cannot read checkpoint {path}: {exc}") from exc
        return loads(raw)


def _record(name: str, tag: int, shape: tuple, payload: bytes) -> bytes:
    key = name.encode("utf-8")
    head = struct.pack("<H", len(key)) + key + struct.pack("<BB", tag, len(shape))
    head += struct.pack(f"<{len(shape)}Q", *shape)
    return head + payload


def dumps(ckpt: Checkpoint) -> bytes:
    records = []
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        records.append(_record(name, TAG_F64, arr.shape, arr.tobytes()))
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    records.append(_record(META_KEY, TAG_JSON, (len(meta),), meta))
    return MAGIC + struct.pack("<II", VERSION, len(records)) + b"".join(records)


def loads(raw: bytes) -> Checkpoint:
    if raw[: len(MAGIC)] != MAGIC:
        raise UnreadableFile("not a checkpoint: bad magic")
    pos = len(MAGIC)
    try:
        version, count = struct.unpack_from("<II", raw, pos)
        if version != VERSION:
            raise UnreadableFile(f"unsupported checkpoint version {version}")
        pos += 8
        arrays, meta = {}, {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + klen].decode("utf-8")
            pos += klen
            tag, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * (8 if tag == TAG_F64 else 1)
            payload = raw[pos : pos + nbytes]
            if len(payload) != nbytes:
                raise UnreadableFile(f"truncated record {name!r}")
            pos += nbytes
            if tag == TAG_F64:
                arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
            elif tag == TAG_JSON:
                meta = json.loads(payload.decode("utf-8"))
            else:
                raise UnreadableFile(f"unknown dtype tag {tag} in record {name!r}")
    except struct.error as exc:
        raise UnreadableFile(f"truncated checkpoint: {exc}") from exc
    return Checkpoint(arrays, meta)
