"""Versioned columnar binary container shared by all on-disk artifacts.

Layout::

    magic            8 bytes  b"TRDYNBIN"
    format version   uint32 little endian
    header length    uint32 little endian
    header           UTF-8 JSON (sorted keys): kind, kind_version, meta,
                     columns = [{name, dtype, shape, offset, nbytes}]
    payload          raw little-endian column bytes, in header order

Writing is deterministic: identical inputs give identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TRDYNBIN"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def dumps(kind, arrays, meta=None, kind_version=1):
    columns = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        columns.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "kind_version": kind_version, "meta": meta or {},
                         "columns": columns}, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header, *blobs])


def loads(data, expect_kind=None):
    if data[:8] != MAGIC:
        raise FormatError("not a terradyn binary file (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    header = json.loads(data[16:16 + hlen].decode())
    if expect_kind is not None and header["kind"] != expect_kind:
        raise FormatError(f"expected a {expect_kind!r} file, found {header['kind']!r}")
    base = 16 + hlen
    arrays = {}
    for col in header["columns"]:
        start = base + col["offset"]
        buf = data[start:start + col["nbytes"]]
        if len(buf) != col["nbytes"]:
            raise FormatError(f"truncated column {col['name']!r}")
        arrays[col["name"]] = np.frombuffer(buf, dtype=np.dtype(col["dtype"])).reshape(col["shape"]).copy()
    return header["kind"], header["kind_version"], header["meta"], arrays


def write(path, kind, arrays, meta=None, kind_version=1):
    Path(path).write_bytes(dumps(kind, arrays, meta, kind_version))


def read(path, expect_kind=None):
    return loads(Path(path).read_bytes(), expect_kind)
