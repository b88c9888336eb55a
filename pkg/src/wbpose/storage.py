"""Deterministic binary containers for datasets and checkpoints.

One archive layout serves both: magic + kind string + record count, an
absolute-offset index, then length-prefixed opaque records. Arrays are
encoded as raw little-endian C-order bytes with an explicit dtype/shape
header, so identical content always produces identical files (no
timestamps, no compression, no pickle).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, IOFailure

__all__ = [
    "write_archive", "read_archive", "encode_array", "decode_array",
    "save_checkpoint", "load_checkpoint",
]

_MAGIC = b"WBARCH01"
_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8"}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1,
                np.dtype("int64"): 2}


def write_archive(path, kind: str, records: list) -> None:
    """Write length-prefixed records with an offset index under a kind tag."""
    kind_b = kind.encode()
    header = _MAGIC + struct.pack("<H", len(kind_b)) + kind_b
    header += struct.pack("<I", len(records))
    index_pos = len(header)
    body_pos = index_pos + 8 * len(records)
    offsets, body = [], []
    at = body_pos
    for rec in records:
        offsets.append(at)
        body.append(struct.pack("<Q", len(rec)) + rec)
        at += 8 + len(rec)
    blob = header + b"".join(struct.pack("<Q", o) for o in offsets) + b"".join(body)
    try:
        Path(path).write_bytes(blob)
    except OSError as e:
        raise IOFailure(f"cannot write archive {path}: {e}") from e


def read_archive(path, expect_kind: str | None = None) -> list:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise IOFailure(f"cannot read archive {path}: {e}") from e
    if len(blob) < len(_MAGIC) + 2 or not blob.startswith(_MAGIC):
        raise FormatError(f"{path}: not an archive (bad magic)")
    at = len(_MAGIC)
    (kind_len,) = struct.unpack_from("<H", blob, at)
    at += 2
    kind = blob[at:at + kind_len].decode()
    at += kind_len
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"{path}: archive kind {kind!r}, expected {expect_kind!r}")
    (count,) = struct.unpack_from("<I", blob, at)
    at += 4
    offsets = struct.unpack_from(f"<{count}Q", blob, at)
    records = []
    for off in offsets:
        (n,) = struct.unpack_from("<Q", blob, off)
        rec = blob[off + 8:off + 8 + n]
        if len(rec) != n:
            raise FormatError(f"{path}: truncated record at offset {off}")
        records.append(rec)
    return records


def encode_array(arr: np.ndarray) -> bytes:
    # ascontiguousarray would promote 0-d to 1-d; asarray keeps the rank
    arr = np.asarray(arr, order="C")
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float64)
    code = _DTYPE_CODES[arr.dtype]
    head = struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(_DTYPES[code]).tobytes()


def decode_array(buf: bytes, at: int = 0):
    """Decode one array; returns (array, next_offset)."""
    code, ndim = struct.unpack_from("<BB", buf, at)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    at += 2
    shape = struct.unpack_from(f"<{ndim}Q", buf, at)
    at += 8 * ndim
    n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    itemsize = np.dtype(_DTYPES[code]).itemsize
    end = at + n * itemsize
    if end > len(buf):
        raise FormatError("truncated array payload")
    arr = np.frombuffer(buf[at:end], dtype=_DTYPES[code]).reshape(shape)
    return arr.copy(), end


def _encode_named(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    return struct.pack("<H", len(nb)) + nb + encode_array(arr)


def _decode_named(rec: bytes):
    (n,) = struct.unpack_from("<H", rec, 0)
    name = rec[2:2 + n].decode()
    arr, _ = decode_array(rec, 2 + n)
    return name, arr


def encode_named_arrays(items) -> bytes:
    """Pack an ordered (name, array) sequence into one record."""
    items = list(items)
    parts = [struct.pack("<I", len(items))]
    parts += [_encode_named(name, np.asarray(arr)) for name, arr in items]
    return b"".join(parts)


def decode_named_arrays(rec: bytes):
    """Inverse of encode_named_arrays; preserves order."""
    if len(rec) < 4:
        raise FormatError("record too short for a named-array block")
    (count,) = struct.unpack_from("<I", rec, 0)
    at = 4
    out = []
    for _ in range(count):
        if at + 2 > len(rec):
            raise FormatError("truncated named-array block")
        (n,) = struct.unpack_from("<H", rec, at)
        name = rec[at + 2:at + 2 + n].decode()
        arr, at = decode_array(rec, at + 2 + n)
        out.append((name, arr))
    if at != len(rec):
        raise FormatError("trailing bytes after named arrays")
    return out


def encode_json(obj) -> bytes:
    """Deterministic JSON record bytes (sorted keys)."""
    return json.dumps(obj, sort_keys=True).encode()


def decode_json(rec: bytes) -> dict:
    try:
        return json.loads(rec.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad JSON record: {e}") from e


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Named weight tensors plus a JSON metadata record, byte-deterministic."""
    records = [json.dumps(meta or {}, sort_keys=True).encode()]
    records += [_encode_named(k, np.asarray(v)) for k, v in sorted(arrays.items())]
    write_archive(path, "wbpose-checkpoint", records)


def load_checkpoint(path):
    """Returns (arrays dict, metadata dict)."""
    records = read_archive(path, "wbpose-checkpoint")
    if not records:
        raise FormatError(f"{path}: empty checkpoint")
    try:
        meta = json.loads(records[0].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad checkpoint metadata: {e}") from e
    arrays = dict(_decode_named(rec) for rec in records[1:])
    return arrays, meta
