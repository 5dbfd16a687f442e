"""Binary netpbm readers and writers: P6 color images and P5 label masks.

Writers emit a canonical header ("P6\\n<w> <h>\\n<maxval>\\n" + raster) so
save/load/save round trips are byte-identical. Maxval is capped at 255
(one byte per sample); label masks use maxval = num_classes - 1.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(Exception):
    pass


def _next_token(f) -> bytes:
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise NetpbmError("unexpected end of file inside header")
        if ch == b"#" and not tok:
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def _read_header(f, magic: bytes) -> tuple[int, int, int]:
    got = f.read(2)
    if got != magic:
        raise NetpbmError(f"bad magic {got!r}, expected {magic.decode()}")
    try:
        width = int(_next_token(f))
        height = int(_next_token(f))
        maxval = int(_next_token(f))
    except ValueError as exc:
        raise NetpbmError(f"malformed header field: {exc}") from None
    if width < 1 or height < 1:
        raise NetpbmError(f"invalid dimensions {width}x{height}")
    if not 0 < maxval <= 255:
        raise NetpbmError(f"unsupported maxval {maxval} (must be 1..255)")
    return width, height, maxval


def read_ppm(path) -> np.ndarray:
    """Binary P6 image as uint8 (3, H, W)."""
    with open(path, "rb") as f:
        width, height, maxval = _read_header(f, b"P6")
        n = width * height * 3
        raster = f.read(n)
        if len(raster) != n:
            raise NetpbmError(f"truncated raster: expected {n} bytes, got {len(raster)}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    if pixels.max(initial=0) > maxval:
        raise NetpbmError(f"sample value exceeds declared maxval {maxval}")
    return pixels.transpose(2, 0, 1).copy()


def write_ppm(path, pixels: np.ndarray, maxval: int = 255) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise NetpbmError(f"write_ppm expects (3, H, W), got {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise NetpbmError(f"write_ppm expects uint8 samples, got {pixels.dtype}")
    if not 0 < maxval <= 255 or pixels.max(initial=0) > maxval:
        raise NetpbmError(f"samples exceed maxval {maxval}")
    _, h, w = pixels.shape
    header = f"P6\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + pixels.transpose(1, 2, 0).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Binary P5 mask as (labels uint8 (H, W), maxval)."""
    with open(path, "rb") as f:
        width, height, maxval = _read_header(f, b"P5")
        n = width * height
        raster = f.read(n)
        if len(raster) != n:
            raise NetpbmError(f"truncated raster: expected {n} bytes, got {len(raster)}")
    labels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    if labels.max(initial=0) > maxval:
        raise NetpbmError(f"label value exceeds declared maxval {maxval}")
    return labels.copy(), maxval


def write_pgm(path, labels: np.ndarray, maxval: int) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise NetpbmError(f"write_pgm expects (H, W) labels, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > maxval:
        raise NetpbmError(f"labels outside [0, {maxval}]")
    if not 0 < maxval <= 255:
        raise NetpbmError(f"unsupported maxval {maxval} (must be 1..255)")
    h, w = labels.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + labels.astype(np.uint8).tobytes())
