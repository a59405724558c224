"""Image I/O: portable float maps for uncertainty data, PNG for previews.

PFM keeps the float32 payload bit-exact, which the render determinism
checks rely on.  Header layout (grayscale): ``Pf\\n<w> <h>\\n-1.0\\n`` with
rows stored bottom-to-top in little-endian float32.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def write_pfm(array: np.ndarray, path) -> None:
    """Grayscale (h, w) or color (h, w, 3) PFM, little-endian."""
    arr = np.asarray(array, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("PFM payload must be finite")
    if arr.ndim == 2:
        tag = b"Pf"
        h, w = arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
        h, w = arr.shape[:2]
    else:
        raise ValueError("expected (h, w) or (h, w, 3) array")
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}".encode() + b"\n-1.0\n")
        f.write(np.flipud(arr).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        channels = 3 if tag == b"PF" else 1
        data = np.frombuffer(f.read(4 * w * h * channels),
                             dtype="<f4" if scale < 0 else ">f4")
    img = data.reshape((h, w, channels) if channels == 3 else (h, w))
    return np.flipud(img).copy()


def write_png(image: np.ndarray, path) -> None:
    """8-bit PNG; values are clamped to [0,1] then scaled to 0..255."""
    arr = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("PNG payload must be finite")
    quantized = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "RGB" if quantized.ndim == 3 else "L"
    Image.fromarray(quantized, mode=mode).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    img = Image.open(path)
    return np.asarray(img, dtype=np.float64) / 255.0


def normalize_for_preview(array: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max normalize a float map for PNG export; returns (img, lo, hi)."""
    arr = np.asarray(array, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-300:
        return np.zeros_like(arr), lo, hi
    return (arr - lo) / (hi - lo), lo, hi
