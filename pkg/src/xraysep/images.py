"""PNG reading and writing for image planes ([C, H, W] floats in [0, 1])."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .pipeline import as_plane, luminance


class ImageError(ValueError):
    """An image file is missing, unreadable or has the wrong layout."""


def read_image(path: str | Path) -> np.ndarray:
    """Load an 8- or 16-bit PNG (or any format OpenCV reads) as a float64 plane."""
    path = Path(path)
    if not path.is_file():
        raise ImageError(f"no such image: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageError(f"cannot decode image: {path}")
    if raw.dtype == np.uint8:
        arr = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        arr = raw.astype(np.float64) / 65535.0
    else:
        raise ImageError(f"unsupported pixel type {raw.dtype} in {path}")
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[:, :, :3]
        arr = arr[:, :, ::-1].transpose(2, 0, 1)     # BGR HWC -> RGB CHW
    try:
        return as_plane(np.ascontiguousarray(arr))
    except ValueError as exc:
        raise ImageError(f"{path}: {exc}") from None


def read_rgb(path: str | Path) -> np.ndarray:
    img = read_image(path)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return img


def read_gray(path: str | Path) -> np.ndarray:
    img = read_image(path)
    return luminance(img) if img.shape[0] == 3 else img


def write_png16(path: str | Path, img: np.ndarray) -> None:
    """Write a plane (values clipped to [0, 1]) as a 16-bit PNG."""
    plane = as_plane(np.asarray(img))
    q = np.round(np.clip(plane, 0.0, 1.0) * 65535.0).astype(np.uint16)
    out = q[0] if q.shape[0] == 1 else np.ascontiguousarray(q.transpose(1, 2, 0)[:, :, ::-1])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), out):
        raise ImageError(f"cannot write {path}")
