"""ARCD sample files: a little-endian container for flow samples.

Layout::

    magic  "ARCD"        4 bytes
    version u16 = 1
    n       u16
    l       u16
    reserved u16 = 0
    count   u64
    count * n * l float32 values
    u8 label flag (1 = labels follow, 0 = none)
    count u8 labels (0 = normal, k >= 1 = anomaly class k)   if flag == 1
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"ARCD"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHQ")


class ArcdError(ValueError):
    pass


@dataclass
class SampleSet:
    values: np.ndarray  # (count, n*l) float32
    n: int
    l: int
    labels: np.ndarray | None = None  # (count,) uint8

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1, self.n * self.l)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (len(self.values),):
                raise ArcdError("labels must have one entry per sample")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def w(self) -> int:
        return self.n * self.l

    def subset(self, idx) -> "SampleSet":
        labels = None if self.labels is None else self.labels[idx]
        return SampleSet(self.values[idx], self.n, self.l, labels)


def to_bytes(samples: SampleSet) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, samples.n, samples.l, 0, len(samples)),
             samples.values.astype("<f4", copy=False).tobytes()]
    if samples.labels is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(samples.labels.tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> SampleSet:
    if len(data) < _HEADER.size:
        raise ArcdError("file shorter than ARCD header")
    magic, version, n, l, reserved, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ArcdError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ArcdError(f"unsupported ARCD version {version}")
    if reserved != 0:
        raise ArcdError("reserved header field must be 0")
    body = count * n * l * 4
    end = _HEADER.size + body
    if len(data) < end:
        raise ArcdError("truncated sample records")
    values = np.frombuffer(data, dtype="<f4", count=count * n * l, offset=_HEADER.size)
    labels = None
    if len(data) > end:
        flag = data[end]
        if flag == 1:
            if len(data) < end + 1 + count:
                raise ArcdError("truncated label block")
            labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=end + 1).copy()
        elif flag != 0:
            raise ArcdError(f"bad label flag {flag}")
    return SampleSet(values.astype(np.float32).reshape(count, n * l), n, l, labels)


def write_arcd(path: str | os.PathLike, samples: SampleSet) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(samples))


def read_arcd(path: str | os.PathLike) -> SampleSet:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
