"""8-bit PGM and 32-bit float PFM raster I/O.

In memory, a gray image is a 2-D ``uint8`` array and a float map is a
2-D ``float32`` array, both row-major with row 0 at the top. On disk:

* PGM: binary ``P5`` with maxval 255, rows top-to-bottom.
* PFM: grayscale ``Pf`` with scale ``-1.0`` (little-endian samples),
  rows stored bottom-to-top as the format requires.

Both readers/writers round-trip payloads bit-exactly. Sums over float
maps must be taken with 64-bit accumulation (see :func:`map_sum`), the
storage width notwithstanding.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    MalformedHeaderError,
    NonFiniteValueError,
    TruncatedDataError,
    UnsupportedEndiannessError,
    UnsupportedMaxvalError,
)

# Conventional aliases; both are plain numpy arrays.
GrayImage = np.ndarray  # 2-D uint8
FloatMap = np.ndarray  # 2-D float32 (float64 accepted where noted)

_WHITESPACE = b" \t\r\n\v\f"


def map_sum(values: np.ndarray) -> float:
    """Sum of a float map with 64-bit accumulation."""
    return float(np.sum(values, dtype=np.float64))


def _next_token(buf: bytes, pos: int, allow_comments: bool) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos]
        if c in _WHITESPACE:
            pos += 1
        elif allow_comments and c == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] not in _WHITESPACE:
        pos += 1
    if start == pos:
        raise MalformedHeaderError("unexpected end of header")
    return buf[start:pos], pos


def _parse_dim(token: bytes, name: str) -> int:
    try:
        value = int(token)
    except ValueError as exc:
        raise MalformedHeaderError(f"bad {name} field {token!r}") from exc
    if value < 1:
        raise MalformedHeaderError(f"{name} must be >= 1, got {value}")
    return value


def _expect_separator(buf: bytes, pos: int) -> int:
    """The header ends with exactly one whitespace byte before the raster."""
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise MalformedHeaderError("missing separator before raster data")
    return pos + 1


def read_pgm(path) -> GrayImage:
    """Read a binary (P5) PGM file with maxval 255."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _next_token(buf, 0, allow_comments=True)
    if magic != b"P5":
        raise MalformedHeaderError(f"expected P5 magic, got {magic!r}")
    wtok, pos = _next_token(buf, pos, allow_comments=True)
    htok, pos = _next_token(buf, pos, allow_comments=True)
    mtok, pos = _next_token(buf, pos, allow_comments=True)
    width = _parse_dim(wtok, "width")
    height = _parse_dim(htok, "height")
    try:
        maxval = int(mtok)
    except ValueError as exc:
        raise MalformedHeaderError(f"bad maxval field {mtok!r}") from exc
    if maxval != 255:
        raise UnsupportedMaxvalError(f"only maxval 255 is supported, got {maxval}")
    pos = _expect_separator(buf, pos)
    need = width * height
    data = buf[pos : pos + need]
    if len(data) < need:
        raise TruncatedDataError(
            f"raster holds {len(data)} bytes, expected {need} for {width}x{height}"
        )
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, image: GrayImage) -> None:
    """Write a binary (P5) PGM file with maxval 255."""
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("gray image must be a 2-D uint8 array")
    height, width = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pfm(path) -> FloatMap:
    """Read a grayscale PFM file into a top-to-bottom float32 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _next_token(buf, 0, allow_comments=False)
    if magic == b"PF":
        raise MalformedHeaderError("color PF files are not supported, expected Pf")
    if magic != b"Pf":
        raise MalformedHeaderError(f"expected Pf magic, got {magic!r}")
    wtok, pos = _next_token(buf, pos, allow_comments=False)
    htok, pos = _next_token(buf, pos, allow_comments=False)
    stok, pos = _next_token(buf, pos, allow_comments=False)
    width = _parse_dim(wtok, "width")
    height = _parse_dim(htok, "height")
    try:
        scale = float(stok)
    except ValueError as exc:
        raise MalformedHeaderError(f"bad scale field {stok!r}") from exc
    if scale > 0.0:
        raise UnsupportedEndiannessError("big-endian PFM (positive scale) not supported")
    if scale == 0.0:
        raise MalformedHeaderError("scale must be nonzero")
    pos = _expect_separator(buf, pos)
    need = width * height * 4
    data = buf[pos : pos + need]
    if len(data) < need:
        raise TruncatedDataError(
            f"raster holds {len(data)} bytes, expected {need} for {width}x{height}"
        )
    flat = np.frombuffer(data, dtype="<f4").reshape(height, width)
    # PFM stores the bottom row first; flip to the top-to-bottom convention.
    values = flat[::-1].astype(np.float32, copy=True)
    if abs(scale) != 1.0:
        values = (values * np.float32(abs(scale))).astype(np.float32)
    if not np.isfinite(values).all():
        raise NonFiniteValueError("float map contains NaN or infinite samples")
    return values


def write_pfm(path, values: np.ndarray) -> None:
    """Write a 2-D float array as a grayscale little-endian PFM file.

    float64 input is narrowed to float32; float32 round-trips bit-exactly.
    """
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError("float map must be a 2-D array")
    if not np.isfinite(arr).all():
        raise NonFiniteValueError("float map contains NaN or infinite samples")
    arr32 = arr.astype("<f4", copy=False)
    height, width = arr32.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        fh.write(arr32[::-1].tobytes())
