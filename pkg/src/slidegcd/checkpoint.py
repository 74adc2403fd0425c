"""Sectioned single-file checkpoint.

Layout (little-endian)::

    b"SGCK"  u32 version  u32 section_count
    repeated section:
        u16 name_len, name (utf-8)
        u8  kind          0 = JSON text, 1 = f32 array, 2 = i64 array
        u8  ndim, ndim x u32 shape
        u64 payload_len, u32 crc32(payload), payload
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError

CKPT_MAGIC = b"SGCK"
CKPT_VERSION = 1

_KIND_JSON, _KIND_F32, _KIND_I64 = 0, 1, 2
_DTYPES = {_KIND_F32: np.dtype("<f4"), _KIND_I64: np.dtype("<i8")}


@dataclass
class Checkpoint:
    config: dict[str, Any]
    patch_dim: int
    params: dict[str, np.ndarray]
    buffer: dict[str, np.ndarray]
    log: list[dict[str, Any]] = field(default_factory=list)


def _sections(ckpt: Checkpoint):
    yield "config", _KIND_JSON, json.dumps({"train": ckpt.config, "patch_dim": ckpt.patch_dim},
                                           sort_keys=True).encode()
    for name in sorted(ckpt.params):
        yield f"param/{name}", _KIND_F32, np.asarray(ckpt.params[name])
    for name in sorted(ckpt.buffer):
        arr = np.asarray(ckpt.buffer[name])
        yield f"buffer/{name}", _KIND_F32 if arr.dtype.kind == "f" else _KIND_I64, arr
    yield "log", _KIND_JSON, json.dumps(ckpt.log, sort_keys=True).encode()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    chunks = []
    count = 0
    for name, kind, obj in _sections(ckpt):
        if kind == _KIND_JSON:
            payload, shape = obj, ()
        else:
            arr = np.ascontiguousarray(obj, dtype=_DTYPES[kind])
            payload, shape = arr.tobytes(), arr.shape
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<BB", kind, len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        chunks.append(struct.pack("<QI", len(payload), zlib.crc32(payload)) + payload)
        count += 1
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, count) + b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated while reading {what} at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def load_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file; any defect raises :class:`FormatError` naming the section."""
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4, "header") != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, count = r.unpack("<II", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    sections: dict[str, Any] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"section {i} name")
        name = r.take(name_len, f"section {i} name").decode("utf-8", errors="replace")
        kind, ndim = r.unpack("<BB", f"section {name!r} header")
        shape = r.unpack(f"<{ndim}I", f"section {name!r} shape")
        length, crc = r.unpack("<QI", f"section {name!r} header")
        payload = r.take(length, f"section {name!r} payload")
        if zlib.crc32(payload) != crc:
            raise FormatError(f"{path}: section {name!r} is corrupt (checksum mismatch)")
        if kind == _KIND_JSON:
            try:
                sections[name] = json.loads(payload.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}: section {name!r} holds invalid JSON ({exc})") from None
        elif kind in _DTYPES:
            dt = _DTYPES[kind]
            if length != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
                raise FormatError(f"{path}: section {name!r} payload does not match shape {shape}")
            sections[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        else:
            raise FormatError(f"{path}: section {name!r} has unknown kind {kind}")
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes after the last section")
    for required in ("config", "log"):
        if required not in sections:
            raise FormatError(f"{path}: missing section {required!r}")
    cfg = sections.pop("config")
    log = sections.pop("log")
    params = {k[len("param/"):]: v for k, v in sections.items() if k.startswith("param/")}
    buffer = {k[len("buffer/"):]: v for k, v in sections.items() if k.startswith("buffer/")}
    return Checkpoint(cfg["train"], int(cfg["patch_dim"]), params, buffer, log)
