"""Binary PPM (P6) and PGM (P5) readers and writers.

Float images in [0, 1] are quantized to 8-bit on write. The readers accept
whitespace and `#` comments between header tokens, which is as liberal as the
format gets in the wild.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (h, w, 3) float image in [0, 1] as binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"PPM needs an (h, w, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(_quantize(image).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an (h, w) float image in [0, 1] as binary P5."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise DataError(f"PGM needs an (h, w) image, got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(_quantize(gray).tobytes())


def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise DataError("truncated image header")
        byte = data[i:i + 1]
        if byte == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif byte.isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
                i += 1
            tokens.append(data[start:i])
    return tokens, i + 1  # one whitespace byte separates header from pixels


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _read_header_tokens(data, 4)
    if tokens[0] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval <= 0 or maxval > 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    count = w * h * channels
    pixels = np.frombuffer(data, dtype=np.uint8, count=count, offset=offset)
    if pixels.size != count:
        raise DataError(f"{path}: expected {count} pixel bytes")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return pixels.reshape(shape).astype(np.float64) / maxval


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into an (h, w, 3) float image in [0, 1]."""
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file into an (h, w) float image in [0, 1]."""
    return _read_netpbm(path, b"P5", 1)
