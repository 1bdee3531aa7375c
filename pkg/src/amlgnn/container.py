"""Flat binary container for named arrays plus one JSON metadata blob.

Used for the on-disk graph cache and for model checkpoints. Layout, all
integers little-endian:

    magic         8 bytes
    version       u8
    entry count   u32
    per entry:
        name length   u16
        name          UTF-8 bytes
        kind          u8: 0 = array, 1 = JSON blob
        array entries: dtype code u8, ndim u8, ndim x u64 dims, raw
                       little-endian payload
        JSON entries:  payload length u64, UTF-8 bytes

Round trips are bit-exact: arrays are written as their raw little-endian
bytes with no re-encoding.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np

from .errors import CacheFormatError

_DTYPE_CODES = {"<f8": 0, "<i8": 1, "<i4": 2, "|b1": 3, "<u8": 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

_META_KEY = "__meta__"


def _to_little_endian(arr: np.ndarray) -> np.ndarray:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    out = np.ascontiguousarray(arr, dtype=dt)
    if out.dtype.str not in _DTYPE_CODES:
        raise CacheFormatError(f"unsupported array dtype {arr.dtype}")
    return out


def write_container(
    dest: str | Path | BinaryIO,
    magic: bytes,
    version: int,
    arrays: dict[str, np.ndarray],
    meta: dict[str, Any] | None = None,
) -> None:
    if len(magic) != 8:
        raise CacheFormatError("magic must be exactly 8 bytes")
    entries: list[tuple[str, Any]] = list(arrays.items())
    if meta is not None:
        entries.append((_META_KEY, meta))

    def _write(fh: BinaryIO) -> None:
        fh.write(magic)
        fh.write(struct.pack("<BI", version, len(entries)))
        for name, value in entries:
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            if isinstance(value, np.ndarray):
                arr = _to_little_endian(value)
                fh.write(struct.pack("<BBB", 0, _DTYPE_CODES[arr.dtype.str], arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(arr.tobytes())
            else:
                blob = json.dumps(value, sort_keys=True).encode("utf-8")
                fh.write(struct.pack("<BQ", 1, len(blob)))
                fh.write(blob)

    if isinstance(dest, (str, Path)):
        with open(dest, "wb") as fh:
            _write(fh)
    else:
        _write(dest)


def read_container(
    src: str | Path | BinaryIO, magic: bytes, max_version: int
) -> tuple[int, dict[str, np.ndarray], dict[str, Any]]:
    """Read a container, returning (version, arrays, meta)."""

    def _read(fh: BinaryIO) -> tuple[int, dict[str, np.ndarray], dict[str, Any]]:
        got = fh.read(8)
        if got != magic:
            raise CacheFormatError(f"bad magic: expected {magic!r}, got {got!r}")
        version, n_entries = _unpack(fh, "<BI")
        if not 1 <= version <= max_version:
            raise CacheFormatError(f"unsupported container version {version}")
        arrays: dict[str, np.ndarray] = {}
        meta: dict[str, Any] = {}
        for _ in range(n_entries):
            (name_len,) = _unpack(fh, "<H")
            name = _read_exact(fh, name_len).decode("utf-8")
            (kind,) = _unpack(fh, "<B")
            if kind == 0:
                code, ndim = _unpack(fh, "<BB")
                if code not in _CODE_DTYPES:
                    raise CacheFormatError(f"unknown dtype code {code}")
                shape = _unpack(fh, f"<{ndim}Q") if ndim else ()
                dtype = np.dtype(_CODE_DTYPES[code])
                count = int(np.prod(shape, dtype=np.int64)) if shape else 1
                raw = _read_exact(fh, count * dtype.itemsize)
                arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
            elif kind == 1:
                (blob_len,) = _unpack(fh, "<Q")
                blob = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
                if name == _META_KEY:
                    meta = blob
                else:
                    meta[name] = blob
            else:
                raise CacheFormatError(f"unknown entry kind {kind}")
        return version, arrays, meta

    if isinstance(src, (str, Path)):
        with open(src, "rb") as fh:
            return _read(fh)
    return _read(src)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CacheFormatError("truncated container")
    return raw


def _unpack(fh: BinaryIO, fmt: str) -> tuple:
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))


def to_bytes(magic: bytes, version: int, arrays: dict[str, np.ndarray], meta=None) -> bytes:
    buf = io.BytesIO()
    write_container(buf, magic, version, arrays, meta)
    return buf.getvalue()
