"""Versioned binary tensor container.

Layout: magic, uint32 version, uint64 header length, UTF-8 JSON header
(metadata plus name/dtype/shape per tensor, keys sorted), then the raw
little-endian tensor bytes in header order. Identical inputs give identical
bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"U3DS3CKP"
VERSION = 1


def dumps(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    entries = []
    blobs = []
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)


def loads(data: bytes):
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    offset = start + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(data):
            raise ValueError(f"checkpoint truncated in tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(e["shape"]).copy()
        offset += nbytes
    if offset != len(data):
        raise ValueError("trailing bytes after last tensor")
    return header["meta"], tensors


def save(path, meta, tensors):
    Path(path).write_bytes(dumps(meta, tensors))


def load(path):
    return loads(Path(path).read_bytes())
