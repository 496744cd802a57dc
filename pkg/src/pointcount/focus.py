"""Focus targets derived from point annotations.

From the per-object discs this module builds the free supervision
signals used alongside the density map:

* a foreground segmentation mask (pixels within one sigma of a center),
* an occlusion map counting how many object footprints (radius two
  sigma) cover each pixel, and its scalar occlusion level,
* global-density levels: a quantization step fitted on a dataset and
  the per-image class label it induces.

The two radii differ on purpose: the segmentation mask hugs the object
core, while occlusion is judged on the full footprint.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence

import numpy as np

from .annot import ObjectDisc, PointSet
from .errors import EmptyDatasetError

DEFAULT_M_LEVELS = 8


def _coverage_count(
    discs: Iterable[ObjectDisc], width: int, height: int, radius_of
) -> np.ndarray:
    """Per-pixel count of discs whose given radius reaches the pixel."""
    out = np.zeros((height, width), dtype=np.int32)
    for disc in discs:
        radius = radius_of(disc)
        if radius <= 0.0:
            continue
        c0 = max(0, int(np.ceil(disc.cx - radius)))
        c1 = min(width - 1, int(np.floor(disc.cx + radius)))
        r0 = max(0, int(np.ceil(disc.cy - radius)))
        r1 = min(height - 1, int(np.floor(disc.cy + radius)))
        if c1 < c0 or r1 < r0:
            continue
        dx = np.arange(c0, c1 + 1, dtype=np.float64) - disc.cx
        dy = np.arange(r0, r1 + 1, dtype=np.float64) - disc.cy
        inside = (dy * dy)[:, None] + (dx * dx)[None, :] <= radius * radius
        out[r0 : r1 + 1, c0 : c1 + 1] += inside
    return out


def seg_mask(discs: Iterable[ObjectDisc], width: int, height: int) -> np.ndarray:
    """Binary foreground mask: 1 where some disc center is within its sigma.

    Pixel p is foreground iff there is a disc with
    ``(p.x - cx)^2 + (p.y - cy)^2 <= sigma^2``.
    """
    cover = _coverage_count(discs, width, height, lambda d: d.sigma)
    return (cover > 0).astype(np.float64)


def occlusion_map(discs: Iterable[ObjectDisc], width: int, height: int) -> np.ndarray:
    """Multiplicity map of object footprints (radius = 2 sigma) per pixel."""
    return _coverage_count(discs, width, height, lambda d: d.radius).astype(np.float64)


def occlusion_level(occ_map: np.ndarray) -> float:
    """Mean multiplicity over covered pixels; 0.0 for an empty map."""
    values = np.asarray(occ_map, dtype=np.float64)
    covered = values[values > 0.0]
    if covered.size == 0:
        return 0.0
    return float(covered.mean())


def density_step(
    dataset: Sequence[tuple[PointSet, float]], m_levels: int = DEFAULT_M_LEVELS
) -> float:
    """Quantization step for global-density labels, fitted on a dataset.

    Each dataset entry is ``(point_set, patch_area)``; the expected
    points per patch is ``N / image_area * patch_area``. The step is
    ``floor(max_expected / m_levels) + 1``, so the busiest patch lands
    in the top level and the step is always at least 1.
    """
    if m_levels < 1:
        raise ValueError("m_levels must be >= 1")
    entries = list(dataset)
    if not entries:
        raise EmptyDatasetError("density_step needs at least one sample")
    peak = 0.0
    for ps, patch_area in entries:
        if patch_area <= 0.0:
            raise ValueError("patch_area must be > 0")
        image_area = ps.width * ps.height
        peak = max(peak, len(ps) / image_area * patch_area)
    return float(np.floor(peak / m_levels) + 1.0)


def global_density_label(
    n_points: int, step: float, m_levels: int = DEFAULT_M_LEVELS
) -> int:
    """Class label of a patch with ``n_points`` objects: min(floor(n/step), m_levels)."""
    if n_points < 0:
        raise ValueError("n_points must be >= 0")
    if step <= 0.0:
        raise ValueError("step must be > 0")
    if m_levels < 1:
        raise ValueError("m_levels must be >= 1")
    return int(min(np.floor(n_points / step), m_levels))


def crowding_level(ps: PointSet) -> float:
    """Annotated points per pixel of the image."""
    return len(ps) / (ps.width * ps.height)
