"""Named-array archive used for head assets, checkpoints, datasets and guidance dumps.

Layout (all integers little-endian)::

    magic     4 bytes   b"PWMA"
    version   uint32
    hlen      uint32    length of the header in bytes
    header    hlen bytes of UTF-8 JSON:
              {"meta": {...}, "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload   concatenated array blocks, offsets relative to payload start

Array dtypes are ``"<f4"`` (float32) or ``"<i4"`` (int32).  Blocks are written
sorted by name, so equal contents always give identical bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PWMA"
VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<i4": np.dtype("<i4")}


class ArchiveError(ValueError):
    pass


def _as_block(arr):
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        return np.ascontiguousarray(arr, dtype="<i4")
    return np.ascontiguousarray(arr, dtype="<f4")


def dumps(arrays, meta=None):
    """Serialize a mapping name -> array to bytes; blocks are stored in name order."""
    entries, blocks, offset = [], [], 0
    for name, arr in sorted(arrays.items()):
        block = _as_block(arr)
        raw = block.tobytes()
        entries.append({"name": name, "dtype": block.dtype.str, "shape": list(block.shape),
                        "offset": offset, "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blocks)


def loads(data):
    """Inverse of :func:`dumps`; returns ``(arrays, meta)``."""
    if data[:4] != MAGIC:
        raise ArchiveError("not a pwmface archive (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    header = json.loads(data[12:12 + hlen].decode())
    payload = memoryview(data)[12 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        dtype = _DTYPES.get(e["dtype"])
        if dtype is None:
            raise ArchiveError(f"unsupported dtype {e['dtype']!r} for {e['name']!r}")
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ArchiveError(f"truncated block for {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save(path, arrays, meta=None):
    Path(path).write_bytes(dumps(arrays, meta))


def load(path):
    return loads(Path(path).read_bytes())
