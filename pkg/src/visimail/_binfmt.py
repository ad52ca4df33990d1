"""Checksummed binary container: magic | u16 version | payload | u64 checksum.

The checksum is the first 8 bytes of BLAKE2b over everything before it,
stored little-endian.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

from .errors import CorruptFile, IoFailure


def checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def pack(magic: bytes, version: int, payload: bytes) -> bytes:
    body = magic + struct.pack("<H", version) + payload
    return body + struct.pack("<Q", checksum(body))


def unpack(data: bytes, magic: bytes, versions: tuple[int, ...]) -> tuple[int, memoryview]:
    if len(data) < len(magic) + 2 + 8:
        raise CorruptFile("file too short")
    if data[: len(magic)] != magic:
        raise CorruptFile("bad magic")
    body, tail = data[:-8], data[-8:]
    if struct.unpack("<Q", tail)[0] != checksum(body):
        raise CorruptFile("checksum mismatch")
    (version,) = struct.unpack_from("<H", data, len(magic))
    if version not in versions:
        raise CorruptFile(f"unsupported version {version}")
    return version, memoryview(body)[len(magic) + 2:]


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


class Reader:
    """Bounds-checked cursor over a payload; any overrun is a CorruptFile."""

    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptFile("payload truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def json_block(self):
        raw = bytes(self.take(self.u32()))
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptFile(f"bad metadata block: {exc}") from exc

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise CorruptFile("trailing bytes in payload")


def json_block(obj) -> bytes:
    raw = canonical_json(obj)
    return struct.pack("<I", len(raw)) + raw


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_file(path: str | os.PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
