"""Binary model container.

Layout (all integers little-endian)::

    8 bytes   magic  b"SNAPUQ1\\0"
    8 bytes   u64    manifest length in bytes
    n bytes   UTF-8 JSON manifest (keys sorted)
    ...       tensor blobs, each starting at an 8-byte aligned offset
              relative to the first byte after the manifest

The manifest carries a ``tensors`` directory of ``{name, shape, dtype,
offset, nbytes}`` records. Supported dtypes: f64, f32, i32, i8, u16.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SNAPUQ1\0"
DTYPES = {
    "f64": np.dtype("<f8"),
    "f32": np.dtype("<f4"),
    "i32": np.dtype("<i4"),
    "i8": np.dtype("i1"),
    "u16": np.dtype("<u2"),
}


def _dtype_code(arr):
    for code, dt in DTYPES.items():
        if arr.dtype == dt:
            return code
    raise FormatError(f"unsupported tensor dtype {arr.dtype}")


def encode(manifest: dict, tensors: dict) -> bytes:
    directory = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        pad = (-offset) % 8
        blobs.append(b"\0" * pad)
        offset += pad
        directory.append({"name": name, "shape": list(arr.shape), "dtype": code,
                          "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    body = dict(manifest)
    body["tensors"] = directory
    header = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode(buf: bytes):
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise FormatError("not a SNAPUQ1 container (bad magic)")
    (n,) = struct.unpack("<Q", buf[8:16])
    try:
        manifest = json.loads(buf[16:16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("corrupt manifest") from exc
    base = 16 + n
    tensors = {}
    for rec in manifest.get("tensors", []):
        if rec["dtype"] not in DTYPES:
            raise FormatError(f"unknown tensor dtype {rec['dtype']!r}")
        dt = DTYPES[rec["dtype"]]
        start = base + rec["offset"]
        end = start + rec["nbytes"]
        if end > len(buf):
            raise FormatError(f"tensor {rec['name']} runs past end of file")
        arr = np.frombuffer(buf[start:end], dtype=dt).reshape(rec["shape"])
        tensors[rec["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return manifest, tensors


def write_container(path, manifest: dict, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(manifest, tensors))


def read_container(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
