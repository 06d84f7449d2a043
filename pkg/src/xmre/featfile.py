"""XMRF binary container for feature matrices and parameter checkpoints.

Layout (all little-endian):

    magic ``XMRF`` | u32 version=1 | u32 record count
    per record:
        u16 key length | UTF-8 key | u32 rows | u32 cols
        u8 metadata flag (1 => three u32s: e1_pos, e2_pos, cls_pos)
        rows*cols float32 values

Positions that do not apply to a record are stored as ``NO_POS``
(0xFFFFFFFF) and surfaced as ``None``. Matrices round-trip bitwise: the
float32 payload written is exactly the payload read back.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from xmre.errors import FeatureFileError

MAGIC = b"XMRF"
VERSION = 1
NO_POS = 0xFFFFFFFF

_HEADER = struct.Struct("<4sII")
_KEYLEN = struct.Struct("<H")
_SHAPE = struct.Struct("<II")
_FLAG = struct.Struct("<B")
_POSITIONS = struct.Struct("<III")


@dataclass(frozen=True)
class RecordMeta:
    """Marker/CLS positions attached to a record; ``None`` when absent."""

    e1_pos: int | None = None
    e2_pos: int | None = None
    cls_pos: int | None = None


@dataclass(frozen=True)
class Record:
    key: str
    matrix: np.ndarray
    meta: RecordMeta | None = None


def _encode_pos(pos: int | None) -> int:
    if pos is None:
        return NO_POS
    if not 0 <= pos < NO_POS:
        raise FeatureFileError(f"position {pos} out of range for the container")
    return pos


def _decode_pos(raw: int) -> int | None:
    return None if raw == NO_POS else raw


def write_records(path: str | Path, records: list[Record]) -> None:
    """Write records in the given order; the write is atomic (tmp + rename)."""

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(records)))
        for rec in records:
            key_bytes = rec.key.encode("utf-8")
            if len(key_bytes) > 0xFFFF:
                raise FeatureFileError(f"record key too long: {rec.key[:40]}...")
            matrix = np.ascontiguousarray(rec.matrix, dtype="<f4")
            if matrix.ndim == 1:
                matrix = matrix.reshape(1, -1)
            if matrix.ndim != 2:
                raise FeatureFileError(
                    f"record {rec.key!r} must be 1-D or 2-D, got ndim={rec.matrix.ndim}"
                )
            rows, cols = matrix.shape
            fh.write(_KEYLEN.pack(len(key_bytes)))
            fh.write(key_bytes)
            fh.write(_SHAPE.pack(rows, cols))
            if rec.meta is None:
                fh.write(_FLAG.pack(0))
            else:
                fh.write(_FLAG.pack(1))
                fh.write(
                    _POSITIONS.pack(
                        _encode_pos(rec.meta.e1_pos),
                        _encode_pos(rec.meta.e2_pos),
                        _encode_pos(rec.meta.cls_pos),
                    )
                )
            fh.write(matrix.tobytes(order="C"))
    tmp.replace(path)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FeatureFileError(f"truncated container while reading {what}")
    return data


def read_records(path: str | Path) -> dict[str, Record]:
    """Read every record; keys must be unique within a file."""

    path = Path(path)
    records: dict[str, Record] = {}
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise FeatureFileError(f"cannot open container {path}: {exc}") from exc
    with fh:
        magic, version, count = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
        if magic != MAGIC:
            raise FeatureFileError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise FeatureFileError(f"{path}: unsupported version {version}")
        for i in range(count):
            (key_len,) = _KEYLEN.unpack(_read_exact(fh, _KEYLEN.size, f"record {i} key length"))
            key = _read_exact(fh, key_len, f"record {i} key").decode("utf-8")
            rows, cols = _SHAPE.unpack(_read_exact(fh, _SHAPE.size, f"record {key!r} shape"))
            (flag,) = _FLAG.unpack(_read_exact(fh, _FLAG.size, f"record {key!r} flag"))
            meta = None
            if flag == 1:
                e1, e2, cls = _POSITIONS.unpack(
                    _read_exact(fh, _POSITIONS.size, f"record {key!r} positions")
                )
                meta = RecordMeta(_decode_pos(e1), _decode_pos(e2), _decode_pos(cls))
            elif flag != 0:
                raise FeatureFileError(f"{path}: record {key!r} has invalid flag {flag}")
            payload = _read_exact(fh, rows * cols * 4, f"record {key!r} payload")
            matrix = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
            if key in records:
                raise FeatureFileError(f"{path}: duplicate record key {key!r}")
            records[key] = Record(key=key, matrix=matrix, meta=meta)
        if fh.read(1):
            raise FeatureFileError(f"{path}: trailing bytes after {count} records")
    return records


class FeatureFile:
    """In-memory view of one XMRF file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._records = read_records(self.path)

    def __contains__(self, key: str) -> bool:
        return key in self._records

    def __len__(self) -> int:
        return len(self._records)

    def keys(self):
        return self._records.keys()

    def get(self, key: str) -> Record:
        try:
            return self._records[key]
        except KeyError:
            raise FeatureFileError(f"{self.path}: missing record key {key!r}") from None

    def matrix(self, key: str, expect_cols: int | None = None) -> np.ndarray:
        """Fetch a matrix, optionally enforcing the run's feature width."""

        rec = self.get(key)
        if expect_cols is not None and rec.matrix.shape[1] != expect_cols:
            from xmre.errors import ConfigError

            raise ConfigError(
                f"{self.path}: record {key!r} has width {rec.matrix.shape[1]}, "
                f"run config expects {expect_cols}"
            )
        return rec.matrix
