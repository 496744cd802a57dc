"""Point annotations and per-object Gaussian widths.

An annotated image is a set of head/object center points inside a
``width x height`` pixel rectangle. Each point gets a Gaussian width
(sigma) either from a fixed setting or adaptively from the distance to
its nearest annotated neighbors, which tracks apparent object size in
crowded regions. The ``ObjectDisc`` pairs a center with its sigma; its
``radius`` (two sigmas) is the footprint used for occlusion reasoning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyPointSetError,
    MalformedFileError,
    NonFiniteError,
    NonPositiveSigmaError,
    OutOfBoundsError,
)

# Width used when an image holds a single point and no neighbor distance
# is available.
SINGLE_POINT_SIGMA = 4.0

# Clamp floor for adaptive sigmas, in pixels.
MIN_SIGMA = 0.5

DEFAULT_K = 3
DEFAULT_SCALE = 0.3


@dataclass(frozen=True)
class Point:
    """A single annotation, in pixel coordinates (x right, y down)."""

    x: float
    y: float


@dataclass(frozen=True)
class PointSet:
    """All annotations of one image. Point order is preserved."""

    width: int
    height: int
    points: tuple[Point, ...]

    def __len__(self) -> int:
        return len(self.points)

    def coords(self) -> np.ndarray:
        """Points as an (N, 2) float64 array of (x, y) rows."""
        if not self.points:
            return np.zeros((0, 2), dtype=np.float64)
        return np.array([(p.x, p.y) for p in self.points], dtype=np.float64)


@dataclass(frozen=True)
class ObjectDisc:
    """A point plus its Gaussian width and derived footprint radius."""

    cx: float
    cy: float
    sigma: float

    @property
    def radius(self) -> float:
        return 2.0 * self.sigma


def make_point_set(width: int, height: int, xy_pairs) -> PointSet:
    """Validate raw (x, y) pairs and build a PointSet."""
    if not isinstance(width, int) or not isinstance(height, int) or width < 1 or height < 1:
        raise MalformedFileError("width and height must be integers >= 1")
    points = []
    for pair in xy_pairs:
        try:
            x, y = float(pair[0]), float(pair[1])
        except (TypeError, ValueError, IndexError) as exc:
            raise MalformedFileError(f"point entry {pair!r} is not a number pair") from exc
        if not (math.isfinite(x) and math.isfinite(y)):
            raise NonFiniteError(f"point ({x}, {y}) has a non-finite coordinate")
        if not (0.0 <= x < width and 0.0 <= y < height):
            raise OutOfBoundsError(
                f"point ({x}, {y}) outside [0, {width}) x [0, {height})"
            )
        points.append(Point(x, y))
    return PointSet(width, height, tuple(points))


def load_annotations(path) -> PointSet:
    """Read a point annotation file.

    The format is a JSON object ``{"width": int, "height": int,
    "points": [[x, y], ...]}``. Unknown keys are ignored. Points may
    repeat; duplicates are kept.
    """
    try:
        with open(path, "rb") as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise MalformedFileError(f"cannot parse annotation file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedFileError("annotation file must hold a JSON object")
    for key in ("width", "height", "points"):
        if key not in doc:
            raise MalformedFileError(f"annotation file missing key {key!r}")
    width, height, raw_points = doc["width"], doc["height"], doc["points"]
    if isinstance(width, bool) or isinstance(height, bool):
        raise MalformedFileError("width and height must be integers")
    if not isinstance(width, int) or not isinstance(height, int):
        raise MalformedFileError("width and height must be integers")
    if not isinstance(raw_points, list):
        raise MalformedFileError("points must be a list of [x, y] pairs")
    for entry in raw_points:
        if not isinstance(entry, (list, tuple)) or len(entry) != 2:
            raise MalformedFileError(f"point entry {entry!r} is not an [x, y] pair")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in entry):
            raise MalformedFileError(f"point entry {entry!r} is not a number pair")
    return make_point_set(width, height, raw_points)


def save_annotations(path, ps: PointSet) -> None:
    """Write a PointSet in the JSON annotation format (stable layout)."""
    doc = {
        "width": ps.width,
        "height": ps.height,
        "points": [[p.x, p.y] for p in ps.points],
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh, separators=(",", ":"), sort_keys=True)
        fh.write("\n")


def _pairwise_distances(coords: np.ndarray) -> np.ndarray:
    """Dense (N, N) Euclidean distance matrix, diagonal set to +inf."""
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    return dist


def nearest_neighbor_indices(ps: PointSet, k: int) -> list[np.ndarray]:
    """Indices of each point's ``min(k, N-1)`` nearest other points.

    Brute force on purpose: N is small for single images and the exact,
    platform-stable ordering matters more than speed. Ties are broken by
    point index.
    """
    n = len(ps)
    if n == 0:
        return []
    m = min(k, n - 1)
    dist = _pairwise_distances(ps.coords())
    out = []
    for i in range(n):
        order = np.argsort(dist[i], kind="stable")
        out.append(order[:m])
    return out


def neighbor_mean_distances(ps: PointSet, k: int) -> np.ndarray:
    """Per-point mean distance to its ``min(k, N-1)`` nearest neighbors.

    Duplicate points are legal and contribute distance zero.
    """
    n = len(ps)
    if n == 0:
        return np.zeros(0, dtype=np.float64)
    if n == 1:
        raise ValueError("a single point has no neighbors")
    m = min(k, n - 1)
    dist = _pairwise_distances(ps.coords())
    dist_sorted = np.sort(dist, axis=1)
    return dist_sorted[:, :m].mean(axis=1)


def estimate_sigmas(ps: PointSet, k: int = DEFAULT_K, scale: float = DEFAULT_SCALE) -> list[ObjectDisc]:
    """Adaptive per-point sigmas from nearest-neighbor spacing.

    sigma_i = scale * mean(distance to the min(k, N-1) nearest other
    points). A lone point falls back to ``SINGLE_POINT_SIGMA``. Every
    sigma is then clamped to ``[MIN_SIGMA, min(width, height) / 4]``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if scale <= 0.0:
        raise ValueError("scale must be > 0")
    n = len(ps)
    if n == 0:
        raise EmptyPointSetError("cannot estimate sigmas without points")
    if n == 1:
        sigmas = np.array([SINGLE_POINT_SIGMA])
    else:
        sigmas = scale * neighbor_mean_distances(ps, k)
    hi = min(ps.width, ps.height) / 4.0
    sigmas = np.clip(sigmas, MIN_SIGMA, hi)
    return [ObjectDisc(p.x, p.y, float(s)) for p, s in zip(ps.points, sigmas)]


def fixed_sigmas(ps: PointSet, sigma: float) -> list[ObjectDisc]:
    """Assign the same sigma to every point (no clamping)."""
    if not (sigma > 0.0) or not math.isfinite(sigma):
        raise NonPositiveSigmaError(f"sigma must be positive and finite, got {sigma}")
    return [ObjectDisc(p.x, p.y, float(sigma)) for p in ps.points]
