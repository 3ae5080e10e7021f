"""Deterministic little-endian binary container for named float arrays.

Layout: magic (4 bytes) | version u32 | header-length u32 | header JSON
(UTF-8) | for each array in header order: raw float64 little-endian bytes |
crc32 u32 over everything before it.  The header carries shapes, so the
payload is self-describing; identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np


class FileFormatError(IOError):
    pass


def write_arrays(path, magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    order = list(arrays)
    header = dict(meta)
    header["arrays"] = {name: list(arrays[name].shape) for name in order}
    header["order"] = order
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += magic
    body += struct.pack("<II", version, len(blob))
    body += blob
    for name in order:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def read_arrays(path, magic: bytes, expect_version: int) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FileFormatError(f"{path}: truncated file")
    payload, crc_stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise FileFormatError(f"{path}: checksum mismatch (corrupt or truncated)")
    if payload[:4] != magic:
        raise FileFormatError(f"{path}: bad magic {payload[:4]!r}")
    version, hlen = struct.unpack("<II", payload[4:12])
    if version != expect_version:
        raise FileFormatError(f"{path}: format version {version}, expected {expect_version}")
    header = json.loads(payload[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    arrays: dict[str, np.ndarray] = {}
    for name in header["order"]:
        shape = tuple(header["arrays"][name])
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        if offset + nbytes > len(payload):
            raise FileFormatError(f"{path}: array {name} extends past end of file")
        arrays[name] = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise FileFormatError(f"{path}: trailing bytes after arrays")
    meta = {k: v for k, v in header.items() if k not in ("arrays", "order")}
    return meta, arrays
