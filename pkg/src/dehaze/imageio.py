"""Image file plumbing: 8-bit RGB (PNG / binary PPM), grayscale maps, f32 sidecars.

In-memory convention everywhere in this package: float32 arrays in [0,1],
channel-last. 8-bit quantization rounds to nearest; lossless float maps go
to raw little-endian ``.f32`` sidecars next to their preview PNGs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(b: np.ndarray) -> np.ndarray:
    return np.asarray(b, dtype=np.float32) / np.float32(255.0)


def read_image(path) -> np.ndarray:
    """Load PNG/PPM as float32 (H, W, 3) in [0,1]; other modes get RGB-converted."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def write_image(path, img: np.ndarray) -> None:
    """Save float [0,1] (H, W, 3) as 8-bit RGB; suffix selects PNG or PPM (P6)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    Image.fromarray(to_uint8(img), "RGB").save(Path(path))


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return from_uint8(arr)


def write_gray(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) map, got {arr.shape}")
    Image.fromarray(to_uint8(arr), "L").save(Path(path))


def write_f32(path, arr: np.ndarray) -> None:
    np.asarray(arr, dtype="<f4").tofile(path)


def read_f32(path, shape) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise ValueError(f"{path}: holds {arr.size} floats, expected {expected} for {shape}")
    return arr.reshape(shape)


def write_density(png_path, density: np.ndarray) -> None:
    """8-bit grayscale preview plus lossless ``.f32`` sidecar sharing the stem."""
    png_path = Path(png_path)
    write_gray(png_path, np.clip(density, 0.0, 1.0))
    write_f32(png_path.with_suffix(".f32"), density)


def read_density(png_path) -> np.ndarray:
    """Prefer the lossless sidecar; fall back to the quantized PNG."""
    png_path = Path(png_path)
    preview = read_gray(png_path)
    sidecar = png_path.with_suffix(".f32")
    if sidecar.exists():
        return read_f32(sidecar, preview.shape)
    return preview
