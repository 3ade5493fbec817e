"""GDFA feature archives: distilled layer features, raw FBank and image payloads.

Layout (little-endian)::

    b"GDFA" | version u16 | layer-name str | channels u32 | ratio u32
    | source-hash str | record-count u32 | records...

    record := utt-id str | T u32 | C u32 | T*C float32 (row-major)
              | label-flag u8 | [T u32 labels] | condition u8

``str`` is a u32 byte length followed by UTF-8.  Condition bytes 0-3 encode
A-D; 255 means untagged.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BadMagicError, DataFormatError, SourceMismatchError, TruncatedFileError, VersionMismatchError

MAGIC = b"GDFA"
VERSION = 1
CONDITIONS = "ABCD"
NO_CONDITION = 255


@dataclass(frozen=True)
class ArchiveHeader:
    layer_name: str
    channels: int
    ratio: int = 1
    source_hash: str = ""


@dataclass
class ArchiveRecord:
    utt_id: str
    frames: np.ndarray  # (T, C) float32
    labels: np.ndarray | None = None
    condition: str | None = None

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_archive(records: Sequence[ArchiveRecord], header: ArchiveHeader) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), _pack_str(header.layer_name),
             struct.pack("<II", header.channels, header.ratio), _pack_str(header.source_hash),
             struct.pack("<I", len(records))]
    for rec in records:
        frames = np.asarray(rec.frames)
        if frames.ndim != 2 or frames.shape[1] != header.channels:
            raise DataFormatError(
                f"record {rec.utt_id!r} has shape {frames.shape}, archive expects {header.channels} channels"
            )
        T = frames.shape[0]
        parts += [_pack_str(rec.utt_id), struct.pack("<II", T, header.channels),
                  np.ascontiguousarray(frames, dtype="<f4").tobytes()]
        if rec.labels is None:
            parts.append(b"\x00")
        else:
            labels = np.asarray(rec.labels)
            if labels.shape != (T,):
                raise DataFormatError(f"record {rec.utt_id!r}: {labels.shape[0]} labels for {T} frames")
            parts += [b"\x01", labels.astype("<u4").tobytes()]
        cond = NO_CONDITION if rec.condition is None else CONDITIONS.index(rec.condition)
        parts.append(struct.pack("<B", cond))
    return b"".join(parts)


def write_archive(records: Sequence[ArchiveRecord], header: ArchiveHeader, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_archive(records, header))
    return path


class _Reader:
    def __init__(self, buf: bytes, name: str):
        self.buf = buf
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.name}: truncated payload, needed {n} bytes", offset=len(self.buf))
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self, dtype: str, count: int) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype, count=count)


def decode_archive(buf: bytes, name: str = "<archive>") -> tuple[ArchiveHeader, list[ArchiveRecord]]:
    r = _Reader(buf, name)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{name}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionMismatchError(f"{name}: archive version {version}, reader supports {VERSION}")
    layer = r.string()
    channels, ratio = r.unpack("<II")
    source = r.string()
    (count,) = r.unpack("<I")
    header = ArchiveHeader(layer, channels, ratio, source)
    records = []
    for _ in range(count):
        utt_id = r.string()
        T, C = r.unpack("<II")
        if C != channels:
            raise DataFormatError(f"{name}: record {utt_id!r} has {C} channels, header says {channels}")
        frames = r.array("<f4", T * C).reshape(T, C).astype(np.float32)
        (flag,) = r.unpack("<B")
        labels = r.array("<u4", T).astype(np.int64) if flag else None
        (cond,) = r.unpack("<B")
        condition = None if cond == NO_CONDITION else CONDITIONS[cond]
        records.append(ArchiveRecord(utt_id, frames, labels, condition))
    if r.pos != len(buf):
        raise DataFormatError(f"{name}: {len(buf) - r.pos} trailing bytes after {count} records")
    return header, records


def read_archive(path) -> tuple[ArchiveHeader, list[ArchiveRecord]]:
    path = Path(path)
    return decode_archive(path.read_bytes(), str(path))


def check_same_source(headers: Iterable[ArchiveHeader]) -> str:
    """Return the shared source checkpoint hash, or raise if archives disagree."""
    hashes = {h.source_hash for h in headers}
    if len(hashes) > 1:
        raise SourceMismatchError(f"archives come from different checkpoints: {sorted(hashes)}")
    return hashes.pop() if hashes else ""
