"""Binary portable graymap (P5) reading and writing."""
from __future__ import annotations

import os

import numpy as np

from .errors import FormatError


def write_pgm(path, data: np.ndarray) -> None:
    """Write a uint8 or uint16 array; 16-bit samples are big-endian."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise FormatError(f"{path}: graymap must be 2-D, got shape {data.shape}")
    if data.dtype == np.uint8:
        maxval, raw = 255, data.tobytes()
    elif data.dtype == np.uint16:
        maxval, raw = 65535, data.astype(">u2").tobytes()
    else:
        raise FormatError(f"{path}: graymap needs uint8 or uint16 data, got {data.dtype}")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(raw)


def _tokens(blob: bytes, count: int, path) -> tuple[list[int], int]:
    vals, pos = [], 2
    while len(vals) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed graymap header")
        vals.append(int(blob[start:pos]))
    return vals, pos + 1


def read_pgm(path) -> np.ndarray:
    path = os.fspath(path)
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read graymap {path}: {exc}") from exc
    if not blob.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary graymap (expected P5 magic)")
    (w, h, maxval), pos = _tokens(blob, 3, path)
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise FormatError(f"{path}: bad graymap header {w}x{h} maxval {maxval}")
    dt = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = w * h * dt.itemsize
    if len(blob) - pos < need:
        raise FormatError(f"{path}: truncated graymap data")
    return np.frombuffer(blob, dtype=dt, count=w * h, offset=pos).reshape(h, w).astype(
        np.uint8 if maxval < 256 else np.uint16)


def to_gray8(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to 0..255."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_gray16(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 65535.0).astype(np.uint16)
