"""Versioned container for named array blocks.

Layout::

    b"SDBLK\\n"                  magic
    uint32 LE                    format version
    uint64 LE                    header length in bytes
    header                       UTF-8 JSON, sorted keys:
                                 {"version", "meta", "blocks": [{"name", "dtype",
                                  "shape", "offset", "nbytes"}, ...]}
    payload                      raw little-endian C-order array bytes

Blocks are written in sorted name order and no timestamps are stored, so
saving the same arrays twice yields identical bytes.  Used for model
checkpoints and for the compact graph arrays of labeled datasets.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDBLK\n"
VERSION = 1
_DTYPES = {"float64", "float32", "int64", "int32", "int16", "int8", "uint8", "uint16", "uint32"}


class CheckpointError(ValueError):
    pass


def save_blocks(path, blocks: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in sorted(blocks):
        arr = np.asarray(blocks[name])
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"block {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "meta": meta or {}, "blocks": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def load_blocks(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a block container")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(data[pos:pos + hlen])
    base = pos + hlen
    blocks = {}
    for e in header["blocks"]:
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]).newbyteorder("<"),
                            count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        blocks[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"], copy=True)
    return blocks, header["meta"]
