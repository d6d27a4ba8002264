"""Binary (P5) PGM reading and writing for 8-bit grayscale images."""
from __future__ import annotations

import re

import numpy as np

from .errors import DataFormatError


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise DataFormatError(f"PGM export needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = _HEADER.match(raw)
    if not m:
        raise DataFormatError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval > 255:
        raise DataFormatError(f"{path}: 16-bit PGM is not supported")
    body = raw[m.end():]
    if len(body) < w * h:
        raise DataFormatError(f"{path}: expected {w * h} pixel bytes, got {len(body)}")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy()
