"""PNG images and float rasters.

Raster layout (little-endian): 8-byte magic ``b"VXRASTER"``, uint32 width, uint32 height,
then width*height float32 values in row-major order. Total header: 16 bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

RASTER_MAGIC = b"VXRASTER"


class RasterError(ValueError):
    pass


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray):
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_raster(path, arr: np.ndarray):
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim != 2:
        raise RasterError("raster must be 2-D")
    h, w = arr.shape
    Path(path).write_bytes(RASTER_MAGIC + struct.pack("<II", w, h) + arr.tobytes())


def read_raster(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != RASTER_MAGIC:
        raise RasterError(f"{path}: not a raster file")
    w, h = struct.unpack("<II", data[8:16])
    if len(data) != 16 + 4 * w * h:
        raise RasterError(f"{path}: expected {w}x{h} floats, file has {len(data) - 16} payload bytes")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)


def normals_to_rgb(normals: np.ndarray) -> np.ndarray:
    """Map unit normals to [0, 1] colors; zero (masked) normals become black."""
    out = 0.5 * (normals + 1.0)
    out[np.all(normals == 0, axis=-1)] = 0.0
    return out
