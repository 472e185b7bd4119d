"""PNG read/write for [0, 1] float images (8-bit RGB/gray, 16-bit gray)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

DTYPE = np.float32


def write_png(path: str | Path, img: np.ndarray, bits: int = 8) -> None:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{path}: refusing to write non-finite pixels")
    a = np.clip(a, 0.0, 1.0)
    if bits == 8:
        q = np.rint(a * 255.0).astype(np.uint8)
        Image.fromarray(q).save(path, format="PNG")
    elif bits == 16:
        if a.ndim != 2:
            raise ValueError("16-bit PNG output is single-channel only")
        q = np.rint(a * 65535.0).astype(np.uint16)
        Image.fromarray(q).save(path, format="PNG")
    else:
        raise ValueError(f"unsupported bit depth {bits}")


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        mode = im.mode
        arr = np.array(im)
    if mode in ("I;16", "I;16B", "I"):
        return (arr.astype(np.float64) / 65535.0).astype(DTYPE)
    if mode == "RGBA":
        arr = arr[..., :3]
    elif mode not in ("L", "RGB"):
        raise ValueError(f"{path}: unsupported PNG mode {mode}")
    return (arr.astype(np.float64) / 255.0).astype(DTYPE)


def read_mask(path: str | Path) -> np.ndarray:
    m = read_png(path)
    if m.ndim == 3:
        m = m[..., 0]
    return (m >= 0.5).astype(DTYPE)
