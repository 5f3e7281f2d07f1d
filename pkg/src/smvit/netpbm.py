"""Binary PGM (P5) and PPM (P6) files, 8-bit only."""

from __future__ import annotations

import os

import numpy as np


class NetpbmParseError(ValueError):
    """Malformed or truncated netpbm data; carries the byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


_WHITESPACE = b" \t\n\r\v\f"


def _read_token(data: bytes, pos: int):
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos : pos + 1] not in _WHITESPACE and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise NetpbmParseError("unexpected end of header", pos)
    return data[start:pos], start, pos


def _read_int(data, pos, what):
    tok, start, pos = _read_token(data, pos)
    if not tok.isdigit():
        raise NetpbmParseError(f"invalid {what} {tok!r}", start)
    value = int(tok)
    if value <= 0:
        raise NetpbmParseError(f"{what} must be positive, got {value}", start)
    return value, start, pos


def decode(data: bytes) -> np.ndarray:
    """Parse P5/P6 bytes into a uint8 array (H, W) or (H, W, 3)."""
    if len(data) < 2:
        raise NetpbmParseError("missing magic number", 0)
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmParseError(f"unsupported magic {magic!r}", 0)
    channels = 1 if magic == b"P5" else 3
    pos = 2
    width, _, pos = _read_int(data, pos, "width")
    height, _, pos = _read_int(data, pos, "height")
    maxval, maxval_at, pos = _read_int(data, pos, "maxval")
    if maxval != 255:
        raise NetpbmParseError(f"maxval must be 255, got {maxval}", maxval_at)
    if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
        raise NetpbmParseError("missing whitespace after maxval", pos)
    pos += 1
    need = width * height * channels
    have = len(data) - pos
    if have < need:
        raise NetpbmParseError(
            f"truncated payload: expected {need} bytes, found {have}", len(data)
        )
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return pixels.reshape(shape).copy()


def encode(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes()


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        img = decode(f.read())
    if img.ndim != 2:
        raise NetpbmParseError("expected a P5 (grayscale) file", 0)
    return img


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        img = decode(f.read())
    if img.ndim != 3:
        raise NetpbmParseError("expected a P6 (RGB) file", 0)
    return img


def write_pgm(path, pixels):
    with open(path, "wb") as f:
        f.write(encode(pixels))


write_ppm = write_pgm


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Quantize reals in [0, 1] to 8-bit: ``round(value * 255)``."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_bytes(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 255.0


def read_map(path) -> np.ndarray:
    """Saliency map as float64 in [0, 1]."""
    return from_bytes(read_pgm(path))


def write_map(path, values):
    write_pgm(path, to_bytes(values))


def read_mask(path) -> np.ndarray:
    return (read_pgm(path) >= 128).astype(np.uint8)


def write_mask(path, mask):
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_image(path) -> np.ndarray:
    """RGB image as float64 (H, W, 3) in [0, 1]."""
    return from_bytes(read_ppm(path))


def write_image(path, image):
    write_ppm(path, to_bytes(image))
