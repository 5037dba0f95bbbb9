"""Patch extraction, overlap-averaged stitching, mixing and batch iteration.

Images ("planes") are numpy arrays shaped ``[channels, height, width]`` with
values in [0, 1]; channels is 1 for X-rays and 3 for RGB.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PATCH_SIZE = 64
OVERLAP = 56
BATCH_SIZE = 32


def as_plane(img: np.ndarray) -> np.ndarray:
    """Promote ``[H, W]`` to ``[1, H, W]`` and check the layout."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected an image shaped [C,H,W] with C in (1, 3), got {img.shape}")
    return img


def luminance(rgb: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of a ``[3,H,W]`` plane, returned as ``[1,H,W]``."""
    rgb = as_plane(rgb)
    return (0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2])[None]


@dataclass
class PatchGrid:
    patch_size: int
    stride: int
    origins: np.ndarray          # [N, 2] (row, col), raster order
    patches: np.ndarray          # [N, C, p, p]
    source_shape: tuple[int, int]
    padded_shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def grid_shape(self) -> tuple[int, int]:
        ph, pw = self.padded_shape
        return ((ph - self.patch_size) // self.stride + 1, (pw - self.patch_size) // self.stride + 1)

    def with_patches(self, patches: np.ndarray) -> "PatchGrid":
        """Same geometry, different patch contents (e.g. network outputs)."""
        patches = np.asarray(patches)
        if patches.shape[0] != len(self) or patches.shape[-2:] != (self.patch_size, self.patch_size):
            raise ValueError(f"patches shaped {patches.shape} do not fit a grid of {len(self)} "
                             f"{self.patch_size}x{self.patch_size} patches")
        return PatchGrid(self.patch_size, self.stride, self.origins, patches,
                         self.source_shape, self.padded_shape)


def patch_count(h: int, w: int, p: int, overlap: int) -> int:
    s = p - overlap
    return (-(-(h - p) // s) + 1) * (-(-(w - p) // s) + 1)


def extract_patches(img: np.ndarray, p: int = PATCH_SIZE, overlap: int = OVERLAP,
                    dtype=np.float32) -> PatchGrid:
    """Cut ``img`` into ``p x p`` patches at stride ``p - overlap`` in raster order.

    If the image does not tile exactly it is reflect-padded at the bottom and
    right; :func:`stitch_patches` crops the padding back off.
    """
    img = as_plane(img)
    if not 0 <= overlap < p:
        raise ValueError(f"need 0 <= overlap < patch size, got overlap={overlap}, p={p}")
    _, h, w = img.shape
    if p > h or p > w:
        raise ValueError(f"patch size {p} exceeds image size {h}x{w}")
    s = p - overlap
    ph = p + -(-(h - p) // s) * s
    pw = p + -(-(w - p) // s) * s
    if (ph, pw) != (h, w):
        img = np.pad(img, ((0, 0), (0, ph - h), (0, pw - w)), mode="reflect")
    win = sliding_window_view(img, (p, p), axis=(1, 2))[:, ::s, ::s]   # [C, nh, nw, p, p]
    nh, nw = win.shape[1:3]
    patches = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4), dtype=dtype).reshape(
        nh * nw, img.shape[0], p, p)
    rows, cols = np.meshgrid(np.arange(nh) * s, np.arange(nw) * s, indexing="ij")
    origins = np.stack([rows.ravel(), cols.ravel()], axis=1)
    return PatchGrid(p, s, origins, patches, (h, w), (ph, pw))


def stitch_patches(grid: PatchGrid) -> np.ndarray:
    """Reassemble a grid, averaging every pixel over the patches that cover it."""
    p = grid.patch_size
    patches = np.asarray(grid.patches)
    if patches.ndim != 4 or patches.shape[0] != len(grid.origins) or patches.shape[2:] != (p, p):
        raise ValueError(f"inconsistent patch array {patches.shape} for grid of {len(grid)} "
                         f"{p}x{p} patches")
    c = patches.shape[1]
    ph, pw = grid.padded_shape
    acc = np.zeros((c, ph, pw), dtype=np.float64)
    cnt = np.zeros((ph, pw), dtype=np.float64)
    for (r, q), patch in zip(grid.origins, patches):
        acc[:, r:r + p, q:q + p] += patch
        cnt[r:r + p, q:q + p] += 1
    if np.any(cnt == 0):
        raise ValueError("grid does not cover the whole image")
    h, w = grid.source_shape
    return (acc / cnt)[:, :h, :w]


def mix_images(x1: np.ndarray, x2: np.ndarray) -> tuple[np.ndarray, float]:
    """Linear mix of two single-channel X-rays.

    Returns the mix and the global factor applied to keep its maximum at or
    below 1 (1.0 when no rescale was needed).
    """
    x1, x2 = as_plane(x1), as_plane(x2)
    if x1.shape != x2.shape:
        raise ValueError(f"cannot mix images of shapes {x1.shape} and {x2.shape}")
    if x1.shape[0] != 1:
        raise ValueError("X-ray images must be single-channel")
    raw = x1 + x2
    peak = float(raw.max())
    factor = 1.0 / peak if peak > 1.0 else 1.0
    return (raw * factor if factor != 1.0 else raw), factor


@dataclass
class TripleDataset:
    r1: PatchGrid
    r2: PatchGrid
    x: PatchGrid

    def __post_init__(self):
        if not (len(self.r1) == len(self.r2) == len(self.x)):
            raise ValueError("patch grids have different lengths")
        if not (np.array_equal(self.r1.origins, self.x.origins)
                and np.array_equal(self.r2.origins, self.x.origins)):
            raise ValueError("patch grids are not aligned")

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def from_images(cls, r1: np.ndarray, r2: np.ndarray, x: np.ndarray,
                    p: int = PATCH_SIZE, overlap: int = OVERLAP) -> "TripleDataset":
        r1, r2, x = as_plane(r1), as_plane(r2), as_plane(x)
        if not (r1.shape[1:] == r2.shape[1:] == x.shape[1:]):
            raise ValueError(f"image sizes differ: {r1.shape}, {r2.shape}, {x.shape}")
        if r1.shape[0] != 3 or r2.shape[0] != 3 or x.shape[0] != 1:
            raise ValueError("expected RGB side images and a single-channel X-ray")
        return cls(extract_patches(r1, p, overlap), extract_patches(r2, p, overlap),
                   extract_patches(x, p, overlap))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation used for ``epoch``; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(dataset: TripleDataset, batch_size: int = BATCH_SIZE, seed: int = 0,
            epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(indices, r1, r2, x)`` batches covering the dataset once in shuffled order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    order = epoch_order(n, seed, epoch)
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        yield idx, dataset.r1.patches[idx], dataset.r2.patches[idx], dataset.x.patches[idx]
