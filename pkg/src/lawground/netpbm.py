"""Binary netpbm readers/writers: PPM (color), PBM (bitmask), PGM (grayscale)."""

import numpy as np

from .errors import DataError


def _read_header(blob, magic, fields):
    if not blob.startswith(magic):
        raise DataError(f"expected {magic!r} header")
    vals, pos = [], 2
    while len(vals) < fields:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment line
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        vals.append(int(blob[start:pos]))
    return vals, pos + 1  # single whitespace after last field


def write_ppm(path, rgb):
    """rgb: (h, w, 3) uint8."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    (w, h, maxval), pos = _read_header(blob, b"P6", 3)
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


def write_pbm(path, mask):
    """mask: (h, w) bool; 1 bits are foreground, rows padded to whole bytes."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    packed = np.packbits(mask, axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{w} {h}\n".encode())
        fh.write(packed.tobytes())


def read_pbm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    (w, h), pos = _read_header(blob, b"P4", 2)
    row_bytes = (w + 7) // 8
    data = np.frombuffer(blob, dtype=np.uint8, count=h * row_bytes, offset=pos)
    bits = np.unpackbits(data.reshape(h, row_bytes), axis=1)[:, :w]
    return bits.astype(bool)


def write_pgm(path, gray):
    """gray: (h, w) floats in [0, 1] or uint8."""
    gray = np.asarray(gray)
    if gray.dtype != np.uint8:
        gray = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    (w, h, maxval), pos = _read_header(blob, b"P5", 3)
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=pos)
    return data.reshape(h, w).copy()
