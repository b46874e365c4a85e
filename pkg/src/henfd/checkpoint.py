"""Versioned binary checkpoint format.

Layout::

    b"HENFD-CKPT-1\\n"
    8-byte little-endian header length
    UTF-8 JSON header {"meta": ..., "params": [{"name", "shape", "offset"}, ...]}
    float64 little-endian row-major payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamStore

MAGIC = b"HENFD-CKPT-1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParamStore, meta: dict):
    entries, blobs, offset = [], [], 0
    for name in params.names():
        arr = np.asarray(params.value(name), dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"meta": meta, "params": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a HENFD-CKPT-1 checkpoint")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen].decode())
        entries, meta = header["params"], header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    body = data[pos + hlen:]
    payload = np.frombuffer(body[:len(body) - len(body) % 8], dtype="<f8")
    store = ParamStore()
    for entry in entries:
        size = int(np.prod(entry["shape"], dtype=int))
        chunk = payload[entry["offset"]:entry["offset"] + size]
        if chunk.size != size:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        store.add(entry["name"], chunk.reshape(entry["shape"]))
    return store, meta
