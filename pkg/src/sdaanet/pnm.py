"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only."""
from __future__ import annotations

import os

import numpy as np


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-D uint8 array, got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(gray).tobytes()


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM needs an (H, W, 3) uint8 array, got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb).tobytes()


def write_pgm(path: str | os.PathLike, gray: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(gray))


def write_ppm(path: str | os.PathLike, rgb: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb))


def decode_pnm(raw: bytes) -> np.ndarray:
    """Strict parser: magic, width, height, maxval 255, exact payload length.

    Comments are not accepted. Returns (H, W) for P5 and (H, W, 3) for P6.
    """
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte before the payload
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ValueError("non-integer PNM header field") from exc
    if maxval != 255:
        raise ValueError(f"maxval must be 255, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    payload = raw[pos:]
    if len(payload) != w * h * channels:
        raise ValueError(f"payload has {len(payload)} bytes, expected {w * h * channels}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())
