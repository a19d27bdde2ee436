"""TSNN checkpoint files.

Layout (little-endian): ``TSNN``, u32 version, u32 descriptor length, UTF-8
JSON descriptor (architecture plus parameter/buffer names and shapes),
u32 chunk count, chunks of (4-byte tag, u32 length, payload), then every
parameter and buffer as f64 in descriptor order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSNN"
VERSION = 1


def save_checkpoint(path, architecture: dict, state: dict[str, np.ndarray],
                    chunks: dict[bytes, bytes] | None = None) -> None:
    names = list(state)
    desc = {"architecture": architecture,
            "tensors": [{"name": k, "shape": list(np.shape(state[k]))} for k in names]}
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    chunks = chunks or {}
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
        fh.write(struct.pack("<I", len(chunks)))
        for tag, payload in chunks.items():
            if len(tag) != 4:
                raise ValueError("chunk tags are 4 bytes")
            fh.write(tag + struct.pack("<I", len(payload)) + payload)
        for k in names:
            fh.write(np.ascontiguousarray(state[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[bytes, bytes]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a TSNN checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported TSNN version {version}")
    off = 12
    desc = json.loads(data[off:off + n].decode("utf-8"))
    off += n
    (nchunks,) = struct.unpack_from("<I", data, off)
    off += 4
    chunks = {}
    for _ in range(nchunks):
        tag = data[off:off + 4]
        (ln,) = struct.unpack_from("<I", data, off + 4)
        chunks[tag] = data[off + 8:off + 8 + ln]
        off += 8 + ln
    state = {}
    for t in desc["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        state[t["name"]] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(t["shape"]).copy()
        off += 8 * size
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return desc["architecture"], state, chunks
