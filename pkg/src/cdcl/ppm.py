"""Binary NetPBM (P6) reading and writing, no external decoder.

Images cross this boundary as (3, H, W) float arrays in [0, 1]; on disk they
are 8-bit interleaved RGB.
"""

from __future__ import annotations

import numpy as np

__all__ = ["PpmError", "read_ppm", "write_ppm"]


class PpmError(ValueError):
    """Malformed or unsupported NetPBM content."""


def _next_token(buf: bytes, pos: int):
    """Skip whitespace and '#' comments, return (token, new_pos)."""
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PpmError("unexpected end of header")
    return buf[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit P6 file into a (3, H, W) float64 array in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _next_token(buf, 0)
    if magic != b"P6":
        raise PpmError(f"{path}: expected P6 magic, got {magic!r}")
    fields = []
    for _ in range(3):
        tok, pos = _next_token(buf, pos)
        if not tok.isdigit():
            raise PpmError(f"{path}: non-numeric header token {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PpmError(f"{path}: bad dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise PpmError(f"{path}: only 8-bit maxval supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    raster = buf[pos : pos + expected]
    if len(raster) != expected:
        raise PpmError(f"{path}: raster has {len(raster)} bytes, expected {expected}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / maxval


def write_ppm(path, image: np.ndarray):
    """Write a (3, H, W) array with values in [0, 1] as 8-bit P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise PpmError(f"write_ppm needs a (3,H,W) image, got shape {image.shape}")
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[1], image.shape[2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(quantized.transpose(1, 2, 0).tobytes())
