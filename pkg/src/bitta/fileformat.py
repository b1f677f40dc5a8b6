"""Shared container: one JSON header line, a blank line, then a raw payload.

Used by stream files (float32), checkpoints and adapter snapshots (float64).
"""
from __future__ import annotations

import json
import os

import numpy as np


class FormatError(Exception):
    """Base class for file-format problems."""


class CorruptHeaderError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def write_container(path, header: dict, payload: np.ndarray, dtype: str) -> None:
    header = dict(header, dtype=dtype, count=int(payload.size))
    text = json.dumps(header, sort_keys=True, allow_nan=False)
    raw = np.ascontiguousarray(payload, dtype=_DTYPES[dtype]).tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(text.encode("utf-8"))
        fh.write(b"\n\n")
        fh.write(raw)
    os.replace(tmp, path)


def read_header(path) -> tuple[dict, int]:
    """Return (header, byte offset of payload)."""
    with open(path, "rb") as fh:
        blob = fh.read(1 << 16)
        cut = blob.find(b"\n\n")
        while cut < 0:
            more = fh.read(1 << 20)
            if not more:
                raise CorruptHeaderError(f"{path}: no header terminator")
            blob += more
            cut = blob.find(b"\n\n")
    try:
        header = json.loads(blob[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable header ({exc})") from None
    if not isinstance(header, dict) or "format" not in header:
        raise CorruptHeaderError(f"{path}: header lacks a format field")
    return header, cut + 2


def read_container(path, expected_format: str) -> tuple[dict, np.ndarray]:
    header, offset = read_header(path)
    if header["format"] != expected_format:
        raise UnsupportedVersionError(
            f"{path}: unsupported version {header['format']!r} (expected {expected_format!r})"
        )
    dtype = _DTYPES.get(header.get("dtype"))
    if dtype is None or not isinstance(header.get("count"), int):
        raise CorruptHeaderError(f"{path}: missing dtype/count")
    with open(path, "rb") as fh:
        fh.seek(offset)
        raw = fh.read()
    if len(raw) != header["count"] * dtype.itemsize:
        raise LengthMismatchError(
            f"{path}: length mismatch, header says {header['count']} values, "
            f"payload holds {len(raw) / dtype.itemsize:g}"
        )
    return header, np.frombuffer(raw, dtype=dtype).copy()
