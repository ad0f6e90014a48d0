"""Versioned binary checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"FSRGCKPT"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header
    20+H    N     raw tensor bytes, concatenated in header order
    20+H+N  32    SHA-256 of every preceding byte

The header holds free-form metadata plus a ``tensors`` list whose entries give
``name``, ``dtype`` (numpy dtype string), ``shape``, ``offset`` (relative to
the start of the tensor block) and ``nbytes``. Arrays are stored C-contiguous
and little-endian, so a load reproduces them bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"FSRGCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


def write_container(path: str | Path, header: Mapping[str, Any],
                    tensors: Mapping[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        a = np.asarray(arr, order="C")
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    full_header = dict(header)
    full_header["tensors"] = entries
    hbytes = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + digest)
    tmp.replace(path)


def read_container(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size + _DIGEST:
        raise CheckpointError(f"{path}: checksum error (file truncated to {len(data)} bytes)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum error (file corrupt or truncated)")
    magic, version, hlen = _PREFIX.unpack_from(body, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not an fsrg checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    block = body[start + hlen:]
    tensors = {}
    for e in header.get("tensors", []):
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(block):
            raise CheckpointError(f"{path}: tensor {e['name']!r} extends past end of data")
        arr = np.frombuffer(block[lo:hi], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
    return header, tensors
