"""Minimal binary PGM (P5) reader/writer.

Images are 8-bit grayscale; masks use 0 for background and 255 for
foreground.  Round trips are bit-exact after quantization.
"""

from __future__ import annotations

import numpy as np


def write_pgm(path: str, values: np.ndarray) -> None:
    """Write a 2-d array as 8-bit binary PGM.

    Boolean arrays map to {0, 255}; float arrays in [0, 1] are scaled to
    [0, 255] and rounded; integer arrays are written as-is.
    """
    if values.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {values.shape}")
    if values.dtype == bool:
        data = np.where(values, 255, 0).astype(np.uint8)
    elif np.issubdtype(values.dtype, np.floating):
        data = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    else:
        data = values.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read an 8-bit binary PGM into a uint8 array of shape (h, w)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval; '#' comments allowed
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(int(raw[pos:end]))
        pos = end
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    data = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, got {data.size}")
    return data.reshape(h, w).copy()
