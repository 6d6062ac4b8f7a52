"""Binary PGM (P5) reading and writing for 8-bit and 16-bit grayscale."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM file into a float64 array of raw intensities."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise DataError(f"{path}: not a binary (P5) PGM file")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    i = 2
    while len(tokens) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(data[start:i])
    i += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if maxval <= 0 or maxval > 65535:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    raw = data[i : i + expected]
    if len(raw) != expected:
        raise DataError(f"{path}: pixel payload has {len(raw)} bytes, expected {expected}")
    pixels = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return pixels.astype(np.float64)


def write_pgm(path, pixels: np.ndarray, maxval: int = 65535) -> None:
    """Write integer intensities in [0, maxval] as binary PGM.

    16-bit samples are stored most significant byte first.
    """
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise DataError("PGM output must be a 2-d array")
    if maxval <= 0 or maxval > 65535:
        raise DataError(f"unsupported maxval {maxval}")
    rounded = np.rint(arr)
    if rounded.min() < 0 or rounded.max() > maxval:
        raise DataError("pixel values outside [0, maxval]")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    height, width = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        fh.write(rounded.astype(dtype).tobytes())
