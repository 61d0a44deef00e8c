"""PNG image I/O. Linear [0,1] values scale to the full integer range:
8-bit for RGB images, 16-bit grayscale for masks and other scalar maps."""

from __future__ import annotations

import numpy as np
from PIL import Image


def save_image_u8(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB" if u8.ndim == 3 else "L").save(path)


def load_image(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype in (np.uint16, np.int32):
        return arr.astype(np.float32) / 65535.0
    raise ValueError(f"unsupported PNG bit depth: {arr.dtype}")


def save_gray_u16(path, values: np.ndarray) -> None:
    arr = np.clip(np.asarray(values), 0.0, 1.0)
    u16 = np.round(arr * 65535.0).astype(np.uint16)
    Image.fromarray(u16).save(path)


def load_gray_u16(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.dtype not in (np.uint16, np.int32):
        raise ValueError(f"expected 16-bit grayscale PNG, got {arr.dtype}")
    return arr.astype(np.float32) / 65535.0
