"""PFM and PPM image file I/O.

PFM layout: header line "PF", then "W H", then the scale line "-1.0"
(negative scale marks little-endian data), followed by rows of float32 RGB
triples stored bottom-up. PPM is 8-bit P6 with gamma 2.2 encoding.
"""

from __future__ import annotations

import numpy as np

from .core import ImageBuffer

__all__ = ["write_pfm", "read_pfm", "write_ppm"]


def write_pfm(buffer: ImageBuffer, path) -> None:
    pix = buffer.pixels
    if not np.all(np.isfinite(pix)):
        raise ValueError("refusing to write non-finite pixel values")
    if np.any(pix < 0):
        raise ValueError("refusing to write negative radiance channels")
    with open(path, "wb") as f:
        f.write(b"PF\n")
        f.write(f"{buffer.width} {buffer.height}\n".encode("ascii"))
        f.write(b"-1.0\n")
        data = pix[::-1].astype("<f4")  # bottom-up rows
        f.write(data.tobytes())


def _read_token(f) -> bytes:
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ValueError("unexpected end of file in PFM header")
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_pfm(path) -> ImageBuffer:
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic != b"PF":
            raise ValueError(f"not a color PFM file (magic {magic!r})")
        try:
            width = int(_read_token(f))
            height = int(_read_token(f))
            scale = float(_read_token(f))
        except ValueError as e:
            raise ValueError(f"malformed PFM header: {e}") from e
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * 3
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise ValueError("truncated PFM pixel data")
        data = np.frombuffer(raw, dtype=dtype).reshape(height, width, 3)
        return ImageBuffer(width, height, data[::-1].astype(np.float32))


def write_ppm(buffer: ImageBuffer, path) -> None:
    """8-bit P6 with gamma 2.2 and clamping to [0, 1] before quantization."""
    pix = np.clip(buffer.pixels.astype(np.float64), 0.0, 1.0)
    encoded = np.rint(255.0 * pix ** (1.0 / 2.2)).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{buffer.width} {buffer.height}\n255\n".encode("ascii"))
        f.write(encoded.tobytes())
