"""Gaussian density-map rendering with exact per-kernel mass.

Each annotated object becomes an isotropic Gaussian kernel centered on
its point. Kernels are evaluated on the pixel grid inside a 4-sigma
window, clipped to the image, and renormalized over the surviving
pixels, so every object contributes exactly unit mass no matter how
close it sits to a border. Summing the map therefore recovers the
object count; that identity is the contract everything downstream
relies on.

Pixel (row r, column c) samples the continuous plane at x = c, y = r.
Maps are float64 in memory; they narrow to float32 at the PFM boundary.
"""

from __future__ import annotations

import math
from collections.abc import Iterable

import numpy as np

from .annot import ObjectDisc
from .errors import CenterOutOfBoundsError, NonPositiveSigmaError, ShapeMismatchError
from .raster import map_sum


def _axis_window(center: float, sigma: float, size: int) -> tuple[int, int]:
    """Inclusive pixel range within 4 sigma of ``center``, clipped to the axis.

    A sub-half-pixel sigma can leave no pixel inside the window; the
    kernel then degenerates to an impulse at the nearest in-image pixel
    so its unit mass is preserved.
    """
    lo = max(0, math.ceil(center - 4.0 * sigma))
    hi = min(size - 1, math.floor(center + 4.0 * sigma))
    if hi < lo:
        nearest = min(size - 1, max(0, math.floor(center + 0.5)))
        return nearest, nearest
    return lo, hi


def render_density(discs: Iterable[ObjectDisc], width: int, height: int) -> np.ndarray:
    """Render unit-mass Gaussian kernels onto a ``height x width`` grid.

    Returns a float64 map whose sum equals the number of discs to within
    accumulation rounding.
    """
    if width < 1 or height < 1:
        raise ValueError("grid must be at least 1x1")
    canvas = np.zeros((height, width), dtype=np.float64)
    for disc in discs:
        if not (disc.sigma > 0.0) or not math.isfinite(disc.sigma):
            raise NonPositiveSigmaError(f"kernel sigma must be positive, got {disc.sigma}")
        if not (0.0 <= disc.cx < width and 0.0 <= disc.cy < height):
            raise CenterOutOfBoundsError(
                f"kernel center ({disc.cx}, {disc.cy}) outside {width}x{height} grid"
            )
        c0, c1 = _axis_window(disc.cx, disc.sigma, width)
        r0, r1 = _axis_window(disc.cy, disc.sigma, height)
        dx = np.arange(c0, c1 + 1, dtype=np.float64) - disc.cx
        dy = np.arange(r0, r1 + 1, dtype=np.float64) - disc.cy
        inv = 1.0 / (2.0 * disc.sigma * disc.sigma)
        kernel = np.exp(-dy * dy * inv)[:, None] * np.exp(-dx * dx * inv)[None, :]
        total = kernel.sum()
        if total <= 0.0:
            # All window weights underflowed; fall back to an impulse at
            # the window pixel nearest the center.
            kernel[:] = 0.0
            rr = int(np.argmin(np.abs(dy)))
            cc = int(np.argmin(np.abs(dx)))
            kernel[rr, cc] = 1.0
        else:
            kernel /= total
        canvas[r0 : r1 + 1, c0 : c1 + 1] += kernel
    return canvas


def count(density: np.ndarray) -> float:
    """Object count of a density map: its sum, accumulated in 64-bit."""
    return map_sum(density)


def apply_mask(density: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Elementwise product of a density map with a [0, 1]-valued mask."""
    d = np.asarray(density)
    m = np.asarray(mask)
    if d.shape != m.shape:
        raise ShapeMismatchError(f"density {d.shape} vs mask {m.shape}")
    if m.size and (m.min() < 0.0 or m.max() > 1.0):
        raise ValueError("mask values must lie in [0, 1]")
    return d * m
