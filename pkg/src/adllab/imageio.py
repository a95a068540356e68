"""Binary netpbm (P5 graymap / P6 pixmap) read and write."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_pnm(img: np.ndarray) -> bytes:
    """Float image in [0, 1]; (H, W) becomes P5, (H, W, 3) becomes P6."""
    u8 = to_u8(img)
    if u8.ndim == 2:
        magic = b"P5"
    elif u8.ndim == 3 and u8.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {u8.shape}")
    h, w = u8.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + u8.tobytes()


def write_pnm(path: str | Path, img: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pnm(img))


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a binary P5/P6 file (maxval < 256) as float64 in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit netpbm not supported")
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise ValueError(f"{path}: unsupported netpbm type {magic!r}")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=pos)
    img = raster.reshape(h, w, channels) if channels == 3 else raster.reshape(h, w)
    return img.astype(np.float64) / maxval
