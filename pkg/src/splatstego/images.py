"""PNG I/O with gamma 2.2 encoding for rendered linear-RGB images."""

from __future__ import annotations

import numpy as np
from PIL import Image

GAMMA = 2.2


def linear_to_u8(img: np.ndarray) -> np.ndarray:
    g = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) ** (1.0 / GAMMA)
    return np.round(g * 255.0).astype(np.uint8)


def u8_to_linear(u8: np.ndarray) -> np.ndarray:
    return (np.asarray(u8, dtype=np.float64) / 255.0) ** GAMMA


def write_png(img: np.ndarray, path) -> None:
    """Write a linear [0,1] HxWx3 image as an 8-bit gamma-encoded PNG."""
    Image.fromarray(linear_to_u8(img), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read an 8-bit PNG back into linear [0,1] HxWx3."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return u8_to_linear(arr)
