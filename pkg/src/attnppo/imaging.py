"""Binary portable anymap writers/readers (P5 graymap, P6 pixmap)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _to_bytes(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    if img.dtype.kind == "f":
        return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return np.clip(img, 0, 255).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an HxW image; float input is taken to be in [0, 1]."""
    g = _to_bytes(gray)
    if g.ndim != 2:
        raise ValueError(f"graymap needs a 2-D array, got shape {g.shape}")
    h, w = g.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + g.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an HxWx3 image; float input is taken to be in [0, 1]."""
    c = _to_bytes(rgb)
    if c.ndim != 3 or c.shape[2] != 3:
        raise ValueError(f"pixmap needs an HxWx3 array, got shape {c.shape}")
    h, w, _ = c.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(c).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a P5 or P6 file written by this module."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit anymaps are supported")
    if magic == b"P5":
        return np.frombuffer(data[pos:], dtype=np.uint8).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(data[pos:], dtype=np.uint8).reshape(h, w, 3)
    raise ValueError(f"unsupported anymap type {magic!r}")


class FrameDumper:
    """Callback for AtariPipeline that writes each raw and processed frame."""

    def __init__(self, out_dir, prefix: str = "frame"):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.prefix = prefix
        self.count = 0

    def __call__(self, raw: np.ndarray, processed: np.ndarray) -> None:
        write_ppm(self.out_dir / f"{self.prefix}_{self.count:06d}_raw.ppm", raw)
        write_pgm(self.out_dir / f"{self.prefix}_{self.count:06d}_proc.pgm", processed)
        self.count += 1
