"""Tensor dumps: binary PGM masks and raw float32 grids with a small header."""
import struct

import numpy as np

from .errors import FormatError


def write_pgm(mask, path):
    """Binary PGM (P5, maxval 255); nonzero cells become 255."""
    mask = np.asarray(mask)
    h, w = mask.shape
    body = np.where(mask > 0, 255, 0).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii") + body)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, off = [], 0
    while len(fields) < 4:
        while data[off : off + 1].isspace():
            off += 1
        start = off
        while not data[off : off + 1].isspace():
            off += 1
        fields.append(data[start:off])
    off += 1
    if fields[0] != b"P5":
        raise FormatError("not a binary PGM", 0)
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off).reshape(h, w)


def write_raw(grid, path):
    """float32 little-endian dump behind an 8-byte header (rows u32, cols u32)."""
    grid = np.asarray(grid)
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w) + grid.astype("<f4").tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise FormatError("raw dump shorter than its header", len(data))
    h, w = struct.unpack_from("<II", data, 0)
    if len(data) != 8 + 4 * h * w:
        raise FormatError(f"raw dump of {h}x{w} should be {8 + 4 * h * w} bytes, found {len(data)}", 8)
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(h, w).astype(np.float64)
