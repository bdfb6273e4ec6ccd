"""Binary PPM (P6) and PGM (P5) readers/writers.

Images live in memory as float64 arrays in [0, 1]: RGB as (3, H, W), masks
and grayscale maps as (H, W).  Files are 8-bit, so a round trip quantizes by
at most 1/255 per channel; exact {0, 1} masks round-trip exactly.
"""

from __future__ import annotations

import numpy as np

__all__ = ["save_ppm", "load_ppm", "save_pgm", "load_pgm", "ImageFormatError"]

MAX_PIXELS = 100_000_000  # refuse absurd headers rather than allocate


class ImageFormatError(ValueError):
    """Malformed or unsupported image file."""


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ImageFormatError(f"save_ppm needs a (3, H, W) array, got {image.shape}")
    _, h, w = image.shape
    raw = _quantize(image).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raw)


def save_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ImageFormatError(f"save_pgm needs a (H, W) array, got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(image).tobytes())


def _read_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise ImageFormatError(f"expected {magic.decode()} header")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment runs to end of line
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise ImageFormatError("unterminated comment")
            pos = nl + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ImageFormatError(f"bad header field: {exc}") from exc
    if w <= 0 or h <= 0 or w * h > MAX_PIXELS:
        raise ImageFormatError(f"unreasonable dimensions {w}x{h}")
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit images supported, maxval={maxval}")
    return w, h, pos


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, pos = _read_header(data, b"P6")
    need = w * h * 3
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise ImageFormatError(f"truncated pixel data: {len(raw)} of {need} bytes")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, pos = _read_header(data, b"P5")
    need = w * h
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise ImageFormatError(f"truncated pixel data: {len(raw)} of {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
