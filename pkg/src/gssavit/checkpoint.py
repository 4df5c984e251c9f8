"""GSCK checkpoint files.

Layout: ``b"GSCK"``, u32 format version, u64 record length, then one
self-describing record (little-endian throughout).  A record value is a
one-byte type tag followed by its payload:

====  ==========  ===================================================
tag   type        payload
====  ==========  ===================================================
0     None        (empty)
1     bool        u8
2     int         i64
3     float       f64
4     str         u32 length, UTF-8 bytes
5     list        u32 count, values
6     dict        u32 count, (u32 key length, UTF-8 key, value) pairs
7     ndarray     u8 dtype code, u32 ndim, u64 dims, raw bytes
====  ==========  ===================================================

Dict entries keep insertion order, so equal checkpoints serialize to
identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedPayloadError, UnsupportedVersionError, SizeMismatchError

GSCK_MAGIC = b"GSCK"
GSCK_VERSION = 1

_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8", 3: "<i4", 4: "|u1"}
_DTYPE_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


def _encode(v, out: list) -> None:
    if v is None:
        out.append(b"\x00")
    elif isinstance(v, (bool, np.bool_)):
        out.append(struct.pack("<BB", 1, bool(v)))
    elif isinstance(v, (int, np.integer)):
        out.append(struct.pack("<Bq", 2, int(v)))
    elif isinstance(v, (float, np.floating)):
        out.append(struct.pack("<Bd", 3, float(v)))
    elif isinstance(v, str):
        b = v.encode("utf-8")
        out.append(struct.pack("<BI", 4, len(b)) + b)
    elif isinstance(v, (list, tuple)):
        out.append(struct.pack("<BI", 5, len(v)))
        for item in v:
            _encode(item, out)
    elif isinstance(v, dict):
        out.append(struct.pack("<BI", 6, len(v)))
        for k, item in v.items():
            kb = str(k).encode("utf-8")
            out.append(struct.pack("<I", len(kb)) + kb)
            _encode(item, out)
    elif isinstance(v, np.ndarray):
        arr = np.asarray(v, order="C")  # ascontiguousarray would turn 0-d into 1-d
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        code = _DTYPE_CODES.get(arr.dtype.str)
        if code is None:
            raise TypeError(f"unsupported array dtype {arr.dtype}")
        out.append(struct.pack("<BBI", 7, code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    else:
        raise TypeError(f"cannot serialize {type(v).__name__}")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedPayloadError(f"record needs {self.off + n} bytes, has {len(self.buf)}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def value(self):
        (tag,) = self.unpack("<B")
        if tag == 0:
            return None
        if tag == 1:
            return bool(self.unpack("<B")[0])
        if tag == 2:
            return self.unpack("<q")[0]
        if tag == 3:
            return self.unpack("<d")[0]
        if tag == 4:
            (n,) = self.unpack("<I")
            return self.take(n).decode("utf-8")
        if tag == 5:
            (n,) = self.unpack("<I")
            return [self.value() for _ in range(n)]
        if tag == 6:
            (n,) = self.unpack("<I")
            out = {}
            for _ in range(n):
                (kl,) = self.unpack("<I")
                key = self.take(kl).decode("utf-8")
                out[key] = self.value()
            return out
        if tag == 7:
            code, ndim = self.unpack("<BI")
            if code not in _DTYPES:
                raise FormatError(f"unknown array dtype code {code}")
            shape = self.unpack(f"<{ndim}Q") if ndim else ()
            dt = np.dtype(_DTYPES[code])
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = self.take(n * dt.itemsize)
            return np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        raise FormatError(f"unknown record tag {tag}")


def encode_record(value) -> bytes:
    out: list = []
    _encode(value, out)
    return b"".join(out)


def decode_record(buf: bytes):
    r = _Reader(buf)
    v = r.value()
    if r.off != len(buf):
        raise SizeMismatchError(f"record has {len(buf) - r.off} trailing bytes")
    return v


@dataclass
class Checkpoint:
    model_config: dict
    params: dict
    optimizer: dict  # {"step": int, "m": {...}, "v": {...}}
    train_config: dict
    step: int
    norm_stats: Optional[dict] = None  # {"mins": array, "maxs": array}
    version: int = GSCK_VERSION
    extra: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "model_config": self.model_config,
            "params": self.params,
            "optimizer": self.optimizer,
            "train_config": self.train_config,
            "step": int(self.step),
            "norm_stats": self.norm_stats,
            "extra": self.extra,
        }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    rec = encode_record(ckpt.to_record())
    Path(path).write_bytes(GSCK_MAGIC + struct.pack("<IQ", ckpt.version, len(rec)) + rec)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != GSCK_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {GSCK_MAGIC!r}")
    if len(buf) < 16:
        raise TruncatedPayloadError(f"{path}: header needs 16 bytes, file has {len(buf)}")
    version, n = struct.unpack_from("<IQ", buf, 4)
    if version != GSCK_VERSION:
        raise UnsupportedVersionError(f"{path}: GSCK version {version} not supported")
    if len(buf) < 16 + n:
        raise TruncatedPayloadError(f"{path}: expected {16 + n} bytes, got {len(buf)}")
    if len(buf) > 16 + n:
        raise SizeMismatchError(f"{path}: expected {16 + n} bytes, got {len(buf)}")
    rec = decode_record(buf[16:])
    return Checkpoint(rec["model_config"], rec["params"], rec["optimizer"], rec["train_config"],
                      rec["step"], rec["norm_stats"], version, rec.get("extra") or {})
