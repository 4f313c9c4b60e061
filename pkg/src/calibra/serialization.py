"""Binary record container used for model and run checkpoints.

Layout (all integers little-endian)::

    magic    8 bytes  b"CALIBRA\\x00"
    version  u32      FORMAT_VERSION
    kind     u16 length + utf-8 ("model" or "run")
    meta     u32 length + utf-8 JSON object
    count    u32      number of arrays
    count x  name:  u16 length + utf-8
             dtype: u8 (0 = float32, 1 = float64, 2 = int64, 3 = uint64)
             ndim:  u8, then ndim x u32 dims
             data:  raw little-endian values, row-major
    crc32    u32      over every preceding byte

Readers validate the whole file before returning anything.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .errors import FormatError

MAGIC = b"CALIBRA\x00"
FORMAT_VERSION = 1
_DTYPES = [np.dtype("<f4"), np.dtype("<f8"), np.dtype("<i8"), np.dtype("<u8")]


def _dtype_code(dtype) -> int:
    dt = np.dtype(dtype).newbyteorder("<")
    for code, known in enumerate(_DTYPES):
        if dt == known:
            return code
    raise FormatError(f"unsupported dtype {dtype}")


def dumps(kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    kb = kind.encode()
    parts.append(struct.pack("<H", len(kb)) + kb)
    mb = json.dumps(meta or {}, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(mb)) + mb)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr.dtype)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes, kind: str | None = None, path: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise FormatError(f"{path}: not a calibra checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: checksum mismatch, file is corrupt")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    try:
        (klen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        file_kind = body[pos:pos + klen].decode()
        pos += klen
        if kind is not None and file_kind != kind:
            raise FormatError(f"{path}: expected a {kind!r} checkpoint, found {file_kind!r}")
        (mlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos:pos + mlen].decode())
        pos += mlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise FormatError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError, IndexError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint ({exc})") from exc
    if pos != len(body):
        raise FormatError(f"{path}: trailing bytes after last array")
    return arrays, meta


def save(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically: a partial file never replaces a good one."""
    path = os.fspath(path)
    blob = dumps(kind, arrays, meta)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = os.fspath(path)
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob, kind, path)
