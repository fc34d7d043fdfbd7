"""Binary PPM (P6) read/write: magic, ASCII dims, maxval 255, raw RGB bytes.

Kept dependency-free and bit-exact so frame inputs decode identically on
every platform. '#' comments are honored anywhere in the header.
"""

from __future__ import annotations

import numpy as np


class PpmError(ValueError):
    def __init__(self, message: str, name: str = "<bytes>"):
        super().__init__(f"{name}: {message}")
        self.name = name


def _read_token(data: bytes, pos: int, name: str) -> tuple[bytes, int]:
    # Skip whitespace and comment lines.
    while pos < len(data):
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PpmError("truncated header", name)
    return data[start:pos], pos


def decode_ppm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode P6 bytes into an (h, w, 3) uint8 RGB array."""
    magic, pos = _read_token(data, 0, name)
    if magic != b"P6":
        raise PpmError(f"bad magic {magic!r}, expected b'P6'", name)
    fields = []
    for what in ("width", "height", "maxval"):
        token, pos = _read_token(data, pos, name)
        if not token.isdigit():
            raise PpmError(f"{what} is not a number: {token!r}", name)
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PpmError(f"bad dimensions {width}x{height}", name)
    if maxval != 255:
        raise PpmError(f"maxval {maxval} not supported, expected 255", name)
    pos += 1  # exactly one whitespace byte before the raster
    expected = width * height * 3
    raster = data[pos : pos + expected]
    if len(raster) != expected:
        raise PpmError(f"raster has {len(raster)} bytes, expected {expected}", name)
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def read_ppm(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise PpmError(f"cannot read: {exc}", path) from exc
    return decode_ppm(data, name=path)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise PpmError(f"image must be (h, w, 3) uint8, got shape {image.shape}")
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + image.tobytes()


def write_ppm(path: str, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))
