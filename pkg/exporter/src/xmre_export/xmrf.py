"""Writer for the XMRF binary container.

Layout (all little-endian):

    magic ``XMRF`` | u32 version=1 | u32 record count
    per record:
        u16 key length | UTF-8 key | u32 rows | u32 cols
        u8 metadata flag (1 => three u32s: e1_pos, e2_pos, cls_pos)
        rows*cols float32 values, row-major

Positions that do not apply are stored as 0xFFFFFFFF. The float32
payload is written verbatim, so matrices round-trip bitwise through any
conforming reader. Files are written atomically (temp file + rename).

This is an independent implementation of the format; the training
package ships its own reader and writer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"XMRF"
VERSION = 1
NO_POS = 0xFFFFFFFF

_HEADER = struct.Struct("<4sII")
_KEYLEN = struct.Struct("<H")
_SHAPE = struct.Struct("<II")
_FLAG = struct.Struct("<B")
_POSITIONS = struct.Struct("<III")


class FormatError(ValueError):
    """A record cannot be represented in the container format."""


@dataclass(frozen=True)
class Positions:
    e1: int | None = None
    e2: int | None = None
    cls: int | None = None


@dataclass(frozen=True)
class Record:
    key: str
    matrix: np.ndarray
    positions: Positions | None = None


def _encode_pos(pos: int | None) -> int:
    if pos is None:
        return NO_POS
    if not 0 <= pos < NO_POS:
        raise FormatError(f"position {pos} out of range for the container")
    return pos


def write_records(path: str | Path, records: list[Record]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(records)))
        for rec in records:
            key_bytes = rec.key.encode("utf-8")
            if len(key_bytes) > 0xFFFF:
                raise FormatError(f"record key too long: {rec.key[:40]}...")
            matrix = np.ascontiguousarray(rec.matrix, dtype="<f4")
            if matrix.ndim == 1:
                matrix = matrix.reshape(1, -1)
            if matrix.ndim != 2:
                raise FormatError(f"record {rec.key!r} must be 1-D or 2-D")
            rows, cols = matrix.shape
            fh.write(_KEYLEN.pack(len(key_bytes)))
            fh.write(key_bytes)
            fh.write(_SHAPE.pack(rows, cols))
            if rec.positions is None:
                fh.write(_FLAG.pack(0))
            else:
                fh.write(_FLAG.pack(1))
                fh.write(
                    _POSITIONS.pack(
                        _encode_pos(rec.positions.e1),
                        _encode_pos(rec.positions.e2),
                        _encode_pos(rec.positions.cls),
                    )
                )
            fh.write(matrix.tobytes(order="C"))
    tmp.replace(path)


def read_records(path: str | Path) -> dict[str, Record]:
    """Minimal conforming reader, used for self-checks after export."""

    def take(fh, n: int, what: str) -> bytes:
        data = fh.read(n)
        if len(data) != n:
            raise FormatError(f"truncated container while reading {what}")
        return data

    records: dict[str, Record] = {}
    with open(path, "rb") as fh:
        magic, version, count = _HEADER.unpack(take(fh, _HEADER.size, "header"))
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        for i in range(count):
            (key_len,) = _KEYLEN.unpack(take(fh, _KEYLEN.size, f"record {i} key length"))
            key = take(fh, key_len, f"record {i} key").decode("utf-8")
            rows, cols = _SHAPE.unpack(take(fh, _SHAPE.size, f"record {key!r} shape"))
            (flag,) = _FLAG.unpack(take(fh, _FLAG.size, f"record {key!r} flag"))
            positions = None
            if flag == 1:
                e1, e2, cls = _POSITIONS.unpack(take(fh, _POSITIONS.size, f"record {key!r} positions"))
                positions = Positions(
                    e1 if e1 != NO_POS else None,
                    e2 if e2 != NO_POS else None,
                    cls if cls != NO_POS else None,
                )
            elif flag != 0:
                raise FormatError(f"{path}: record {key!r} has invalid flag {flag}")
            payload = take(fh, rows * cols * 4, f"record {key!r} payload")
            matrix = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
            if key in records:
                raise FormatError(f"{path}: duplicate record key {key!r}")
            records[key] = Record(key=key, matrix=matrix, positions=positions)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} records")
    return records
