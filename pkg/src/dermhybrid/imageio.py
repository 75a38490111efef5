"""File formats: 8-bit PNG images/masks and raw float32 probability grids."""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image


def read_rgb(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_rgb(path: str | os.PathLike, img: np.ndarray) -> None:
    data = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """Single-channel PNG, values above 127 are lesion."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def read_probmap(path: str | os.PathLike) -> np.ndarray:
    """Read a probability map from an 8-bit PNG (scaled by 1/255) or a ``.f32`` grid.

    The grid format is an 8-byte header (width, height as little-endian
    uint32) followed by ``height * width`` little-endian float32 values in
    row-major order.
    """
    path = Path(path)
    if path.suffix.lower() == ".png":
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated probability grid header")
    width, height = struct.unpack("<II", raw[:8])
    expected = 8 + 4 * width * height
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {width}x{height}, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=8).astype(np.float64)
    return values.reshape(height, width)


def write_probmap(path: str | os.PathLike, prob: np.ndarray) -> None:
    path = Path(path)
    prob = np.asarray(prob, dtype=np.float64)
    if path.suffix.lower() == ".png":
        data = np.clip(np.rint(prob * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="L").save(path, format="PNG")
        return
    height, width = prob.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", width, height))
        fh.write(prob.astype("<f4").tobytes())
