"""Seeded synthetic stand-ins for a double-sided painting.

Each side is an RGB image plus the X-ray it would produce. The X-ray is a
linear function of the same scalar field that drives the paint colour, optionally with a wood-grain or
crack overlay that is invisible in the RGB image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .pipeline import mix_images

KINDS = ("texture-pair", "gradient-pair")


@dataclass
class SyntheticSpec:
    kind: str = "texture-pair"
    seed: int = 0
    size: int = 128
    grain: float = 0.0     # amplitude of a wood-grain overlay added to side 1's X-ray
    cracks: float = 0.0    # amplitude of a crack overlay added to side 2's X-ray


@dataclass
class SyntheticPair:
    r1: np.ndarray
    r2: np.ndarray
    x1: np.ndarray         # ground truth, already scaled by ``factor``
    x2: np.ndarray
    x: np.ndarray
    factor: float


def _normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def _palette(rng: np.random.Generator, t: np.ndarray) -> np.ndarray:
    """Map a scalar field in [0, 1] through a random two-colour ramp."""
    c0 = rng.uniform(0.0, 0.35, size=3)
    c1 = rng.uniform(0.65, 1.0, size=3)
    return np.clip(c0[:, None, None] * (1 - t) + c1[:, None, None] * t, 0, 1)


def _stripes(rng, n):
    yy, xx = np.mgrid[0:n, 0:n] / n
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(3, 6)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    warp = gaussian_filter(rng.normal(size=(n, n)), n / 12) * n / 8
    return _normalize(np.sin(2 * np.pi * freq * u + warp))


def _blobs(rng, n):
    field = gaussian_filter(rng.normal(size=(n, n)), n / 20, mode="wrap")
    return _normalize(np.tanh(3 * field / field.std()))


def _gradient(rng, n):
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1)
    theta = rng.uniform(0, 2 * np.pi)
    return _normalize(np.cos(theta) * xx + np.sin(theta) * yy)


def _grain(rng, n):
    yy, xx = np.mgrid[0:n, 0:n] / n
    wobble = gaussian_filter(rng.normal(size=(n, n)), n / 16) * 4
    return _normalize(np.sin(2 * np.pi * 18 * xx + wobble))


def _cracks(rng, n):
    field = gaussian_filter(rng.normal(size=(n, n)), 2.0)
    return (np.abs(field) < 0.02 * field.std() * 10).astype(float)


def make_pair(spec: SyntheticSpec) -> SyntheticPair:
    """Generate two sides, their X-rays and the mixed X-ray. Fully seed-determined."""
    if spec.kind not in KINDS:
        raise ValueError(f"unknown generator kind {spec.kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    if spec.kind == "texture-pair":
        t1, t2 = _stripes(rng, n), _blobs(rng, n)
    else:
        t1, t2 = _gradient(rng, n), _gradient(rng, n)
    r1, r2 = _palette(rng, t1), _palette(rng, t2)
    x1 = 0.05 + 0.4 * t1[None]
    x2 = 0.05 + 0.4 * t2[None]
    if spec.grain:
        x1 = x1 + spec.grain * _grain(rng, n)[None]
    if spec.cracks:
        x2 = x2 + spec.cracks * _cracks(rng, n)[None]
    x1, x2 = np.clip(x1, 0, 1), np.clip(x2, 0, 1)
    x, factor = mix_images(x1, x2)
    return SyntheticPair(r1, r2, x1 * factor, x2 * factor, x, factor)
