"""Versioned binary checkpoint container.

Layout: magic  b"CTCG" | format version u32 LE | header length u64 LE |
header JSON (config, tensor names/shapes/tags) | raw little-endian float32
tensor data in header order.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"CTCG"
FORMAT_VERSION = 1


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray],
                    tags: dict[str, str] | None = None) -> Path:
    tags = tags or {}
    entries = []
    blobs = []
    for name, value in tensors.items():
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(value, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape),
                        "tag": tags.get(name, "frozen")})
        blobs.append(arr.tobytes())
    header = json.dumps({"config": config, "tensors": entries}).encode("utf-8")

    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path):
    """Returns (config, name -> float32 array, name -> tag)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    (header_len,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc

    tensors, tags = {}, {}
    offset = 16 + header_len
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * 4
        if offset + nbytes > len(data):
            raise CheckpointError(f"truncated tensor data at {entry['name']!r}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
        tags[entry["name"]] = entry.get("tag", "frozen")
        offset += nbytes
    return header["config"], tensors, tags
