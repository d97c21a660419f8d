"""Deterministic versioned checkpoint container.

A checkpoint is a single file: magic, version, a JSON manifest (arbitrary
metadata plus a tensor table), then raw little-endian array blobs. The byte
stream depends only on the stored content, so identical training states
serialize to identical files; writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CANA"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_state(path, meta: dict, arrays: dict) -> None:
    """Write metadata (JSON-serializable) and named numpy arrays atomically."""
    path = Path(path)
    table = {}
    offset = 0
    blobs = []
    # canonical name order: byte layout independent of dict insertion order
    for name in sorted(arrays):
        arr = arrays[name]
        arr = np.ascontiguousarray(arr)
        blob = arr.tobytes()
        table[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"format": FORMAT_VERSION, "meta": meta, "tensors": table},
                        sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_state(path):
    """Read (meta, arrays); raises CheckpointError on any malformation."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    try:
        if raw[:4] != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        version, header_len = struct.unpack("<II", raw[4:12])
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} incompatible with supported {FORMAT_VERSION}")
        header = json.loads(raw[12:12 + header_len])
        base = 12 + header_len
        arrays = {}
        total = 0
        for name, entry in header["tensors"].items():
            start = base + int(entry["offset"])
            nbytes = int(entry["nbytes"])
            blob = raw[start:start + nbytes]
            if len(blob) != nbytes:
                raise CheckpointError(f"checkpoint {path} truncated at tensor {name!r}")
            arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]))
            arrays[name] = arr.reshape(entry["shape"]).copy()
            total += nbytes
        if base + total != len(raw):
            raise CheckpointError(f"checkpoint {path} has trailing or missing bytes")
        return header["meta"], arrays
    except CheckpointError:
        raise
    except (ValueError, KeyError, struct.error, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
