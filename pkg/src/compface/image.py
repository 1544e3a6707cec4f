"""Grayscale raster type and binary PGM (P5) I/O."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PgmError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FaceImage:
    """Immutable 8-bit luminance raster, stored row-major as (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"FaceImage needs a non-empty 2-D array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            raise TypeError(f"FaceImage pixels must be uint8, got {arr.dtype}")
        arr = np.array(arr, dtype=np.uint8, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @classmethod
    def from_float(cls, values: np.ndarray) -> "FaceImage":
        """Round and clip a float raster into 8-bit range."""
        return cls(np.clip(np.rint(values), 0, 255).astype(np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def vector(self) -> np.ndarray:
        return self.pixels.astype(np.float64).ravel()

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.width}x{self.height}:".encode())
        h.update(self.pixels.tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, FaceImage):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.shape, self.pixels.tobytes()))


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PgmError("truncated PGM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def decode_pgm_raw(data: bytes) -> tuple[np.ndarray, int]:
    """Decode a P5 raster with any 8-bit maxval; returns (pixels, maxval)."""
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P5":
        raise PgmError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PgmError(f"bad PGM header: {exc}") from None
    if width <= 0 or height <= 0:
        raise PgmError(f"bad PGM dimensions {width}x{height}")
    if not 0 < maxval < 256:
        raise PgmError(f"only 8-bit PGM is supported, got maxval {maxval}")
    raster = data[offset : offset + width * height]
    if len(raster) != width * height:
        raise PgmError(f"PGM raster truncated: expected {width * height} bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy(), maxval


def decode_pgm(data: bytes) -> np.ndarray:
    pixels, maxval = decode_pgm_raw(data)
    if maxval != 255:
        raise PgmError(f"luminance images must use maxval 255, got {maxval}")
    return pixels


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise PgmError("encode_pgm expects a 2-D uint8 array")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    try:
        return decode_pgm(data)
    except PgmError as exc:
        raise PgmError(f"{path}: {exc}") from None


def write_pgm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(pixels))


def load_image(path) -> FaceImage:
    return FaceImage(read_pgm(path))


def save_image(path, image: FaceImage) -> None:
    write_pgm(path, image.pixels)
