"""Shared helpers for the checksummed binary containers and atomic writes."""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """A binary artifact is corrupt, truncated or of an unsupported version."""


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def f32le(arr: np.ndarray) -> bytes:
    return np.asarray(arr, dtype="<f4").tobytes()


def pack_container(magic: bytes, version: int, header_tail: bytes, payload: bytes) -> bytes:
    head = magic + struct.pack("<I", version) + header_tail
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def unpack_container(data: bytes, magic: bytes, version: int, tail_fmt: str):
    """Validate magic, version and CRC; return (header tail fields, payload bytes)."""
    head_size = 8 + struct.calcsize(tail_fmt)
    if len(data) < head_size + 4:
        raise FormatError("file too short for header")
    if data[:4] != magic:
        raise FormatError(f"bad magic {data[:4]!r}, expected {magic!r}")
    (ver,) = struct.unpack_from("<I", data, 4)
    if ver != version:
        raise FormatError(f"unsupported format version {ver} (expected {version})")
    fields = struct.unpack_from(tail_fmt, data, 8)
    payload = data[head_size:-4]
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    return fields, payload, crc


def check_crc(payload: bytes, crc: int) -> None:
    if zlib.crc32(payload) != crc:
        raise FormatError("checksum mismatch")
