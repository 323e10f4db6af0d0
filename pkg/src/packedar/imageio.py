"""File formats for raw images: binary PPM (P6) and a raw float32 tensor dump.

These are the only two accepted input formats. The raw tensor file is a
16-byte header (4-byte magic ``RIMG``, then H, W, C as little-endian
uint32) followed by H*W*C float32 little-endian values in (row, col,
channel) order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

RAW_MAGIC = b"RIMG"
_RAW_HEADER = struct.Struct("<4sIII")


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 PPM into an (H, W, 3) float32 array in [0, 1].

    Only maxval <= 255 (one byte per sample) is supported.
    """
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    # header = 4 whitespace-separated tokens, '#' comments allowed
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary P6 PPM (magic {fields[0]!r})")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise ValueError(f"{path}: maxval {maxval} unsupported (need <= 255)")
    expected = width * height * 3
    raster = data[pos : pos + expected]
    if len(raster) != expected:
        raise ValueError(f"{path}: expected {expected} raster bytes, got {len(raster)}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float32) / float(maxval)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) array with values in [0, 1] as binary P6."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) array, got shape {image.shape}")
    h, w, _ = image.shape
    raster = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(raster.tobytes())


def read_raw_tensor(path: str | Path) -> np.ndarray:
    """Read the raw float32 tensor format into an (H, W, C) float32 array."""
    data = Path(path).read_bytes()
    if len(data) < _RAW_HEADER.size:
        raise ValueError(f"{path}: file shorter than the 16-byte header")
    magic, h, w, c = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {RAW_MAGIC!r}")
    body = data[_RAW_HEADER.size :]
    expected = h * w * c * 4
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)


def write_raw_tensor(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, C) float array in the raw tensor format."""
    if image.ndim != 3:
        raise ValueError(f"expected an (H, W, C) array, got shape {image.shape}")
    h, w, c = image.shape
    with open(path, "wb") as f:
        f.write(_RAW_HEADER.pack(RAW_MAGIC, h, w, c))
        f.write(image.astype("<f4").tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Dispatch on extension: .ppm -> PPM P6, .rimg -> raw tensor."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".rimg":
        return read_raw_tensor(path)
    raise ValueError(f"{path}: unsupported image format {suffix!r} (use .ppm or .rimg)")
