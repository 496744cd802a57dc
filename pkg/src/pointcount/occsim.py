"""Occlusion simulation by copy-pasting annotated objects.

To manufacture training examples of occluded objects, an existing
object (the "copy") is pasted so that it partially covers another one
(the "occluded"). The paste offset is polar: distance
``r = r_copy + r_occ * eps_r`` and angle ``theta = 2*pi*eps_theta``
from the occluded center, with both offset components floored to whole
pixels. Blending uses a Gaussian-blurred disc as alpha so the pasted
object has a soft rim instead of a hard square seam. Every successful
paste also adds a unit-mass kernel to the density map and a point to
the annotation list, keeping the count ledger consistent.

How many pastes an image gets adapts to how occluded it already is:
``min(beta / max(level, 1), 1)`` of its objects, so crowded images are
not pushed further into the long tail.

Randomness comes exclusively from :class:`pointcount.rng.CounterRng`,
so a (seed, inputs) pair fully determines the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .annot import ObjectDisc, Point, PointSet, nearest_neighbor_indices
from .density import render_density
from .errors import PasteOutOfBoundsError, ShapeMismatchError
from .focus import occlusion_level, occlusion_map
from .rng import CounterRng

DEFAULT_BETA = 0.3
COPY_NEIGHBORS = 5
MAX_PLAN_ATTEMPTS = 10


@dataclass(frozen=True)
class PastePlan:
    """One planned paste: which object occludes which, and where."""

    occ_index: int
    copy_index: int
    paste_x: float
    paste_y: float
    eps_r: float
    eps_theta: float


@dataclass
class AugmentResult:
    """Augmented sample plus the ledger needed to audit it."""

    image: np.ndarray
    points: PointSet
    density: np.ndarray
    discs: list[ObjectDisc]
    plans: list[PastePlan] = field(default_factory=list)
    attempted: int = 0
    succeeded: int = 0


def paste_position(
    occluded: ObjectDisc, copy: ObjectDisc, eps_r: float, eps_theta: float
) -> tuple[float, float]:
    """Paste center for ``copy`` so that it overlaps ``occluded``.

    ``eps_r`` and ``eps_theta`` are uniform draws in [0, 1). The offset
    components are floored (toward minus infinity, not toward zero)
    before being added to the occluded center.
    """
    r = copy.radius + occluded.radius * eps_r
    theta = 2.0 * math.pi * eps_theta
    x = math.floor(r * math.cos(theta)) + occluded.cx
    y = math.floor(r * math.sin(theta)) + occluded.cy
    return x, y


def _gaussian_stencil(blur_sigma: float) -> np.ndarray:
    """1-D normalized Gaussian taps on integer offsets within 4 sigma."""
    half = math.floor(4.0 * blur_sigma)
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    taps = np.exp(-(offsets * offsets) / (2.0 * blur_sigma * blur_sigma))
    return taps / taps.sum()


def _convolve_axis(arr: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    half = len(taps) // 2
    if half == 0:
        return arr * taps[0]
    pad = [(0, 0), (0, 0)]
    pad[axis] = (half, half)
    padded = np.pad(arr, pad)
    out = np.zeros_like(arr)
    size = arr.shape[axis]
    for t, weight in enumerate(taps):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(t, t + size)
        out += weight * padded[tuple(sl)]
    return out


def blend_mask(
    width: int,
    height: int,
    paste_x: float,
    paste_y: float,
    r_paste: float,
    blur_sigma: float,
) -> np.ndarray:
    """Soft alpha mask: a binary disc blurred by a normalized Gaussian.

    The disc has radius ``r_paste`` around the paste center; the blur
    kernel lives on integer offsets within 4 sigma (zero padding at the
    image border, same discretization as the density renderer). Values
    are clamped to [0, 1]. As ``blur_sigma`` shrinks below a quarter
    pixel the kernel degenerates to identity and the mask is the disc.
    """
    if not (blur_sigma > 0.0) or not math.isfinite(blur_sigma):
        raise ValueError(f"blur_sigma must be positive and finite, got {blur_sigma}")
    if r_paste <= 0.0:
        raise ValueError(f"r_paste must be positive, got {r_paste}")
    xs = np.arange(width, dtype=np.float64) - paste_x
    ys = np.arange(height, dtype=np.float64) - paste_y
    disc = ((ys * ys)[:, None] + (xs * xs)[None, :] <= r_paste * r_paste).astype(
        np.float64
    )
    taps = _gaussian_stencil(blur_sigma)
    soft = _convolve_axis(_convolve_axis(disc, taps, axis=0), taps, axis=1)
    return np.clip(soft, 0.0, 1.0)


def adaptive_budget(level: float, beta: float = DEFAULT_BETA) -> float:
    """Fraction of objects to paste given the image's occlusion level."""
    if beta < 0.0:
        raise ValueError("beta must be >= 0")
    return min(beta / max(level, 1.0), 1.0)


def apply_occlusion(
    image: np.ndarray,
    dens: np.ndarray,
    discs: list[ObjectDisc],
    plan: PastePlan,
    blur_sigma: float | None = None,
) -> tuple[np.ndarray, np.ndarray, list[ObjectDisc]]:
    """Execute one paste: blend pixels, add density mass, append the disc.

    The copied square patch has half-side ``floor(r_copy)`` around the
    copied object, clipped at the borders on both ends. The pasted
    object keeps the copied object's footprint (sigma = r_copy / 2).
    ``blur_sigma`` defaults to ``r_copy / 4``.
    """
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("image must be a 2-D uint8 array")
    height, width = img.shape
    if np.asarray(dens).shape != img.shape:
        raise ShapeMismatchError(f"density {np.asarray(dens).shape} vs image {img.shape}")
    copy_disc = discs[plan.copy_index]
    px, py = plan.paste_x, plan.paste_y
    if not (0.0 <= px < width and 0.0 <= py < height):
        raise PasteOutOfBoundsError(f"paste center ({px}, {py}) outside {width}x{height}")
    r_copy = copy_disc.radius
    if blur_sigma is None:
        blur_sigma = r_copy / 4.0

    # Source material: the square patch around the copied object, laid
    # down at the paste center. Outside the patch the donor image is
    # the original, so blending there is a no-op.
    donor = img.copy()
    half = math.floor(r_copy)
    src_r = math.floor(copy_disc.cy + 0.5)
    src_c = math.floor(copy_disc.cx + 0.5)
    dst_r = math.floor(py + 0.5)
    dst_c = math.floor(px + 0.5)
    d_lo_r = max(-half, -src_r, -dst_r)
    d_hi_r = min(half, height - 1 - src_r, height - 1 - dst_r)
    d_lo_c = max(-half, -src_c, -dst_c)
    d_hi_c = min(half, width - 1 - src_c, width - 1 - dst_c)
    if d_lo_r <= d_hi_r and d_lo_c <= d_hi_c:
        donor[dst_r + d_lo_r : dst_r + d_hi_r + 1, dst_c + d_lo_c : dst_c + d_hi_c + 1] = img[
            src_r + d_lo_r : src_r + d_hi_r + 1, src_c + d_lo_c : src_c + d_hi_c + 1
        ]

    alpha = blend_mask(width, height, px, py, r_copy, blur_sigma)
    blended = (1.0 - alpha) * img.astype(np.float64) + alpha * donor.astype(np.float64)
    out_img = np.rint(blended).astype(np.uint8)

    paste_disc = ObjectDisc(px, py, r_copy / 2.0)
    out_dens = np.asarray(dens, dtype=np.float64) + render_density(
        [paste_disc], width, height
    )
    return out_img, out_dens, list(discs) + [paste_disc]


def augment_sample(
    image: np.ndarray,
    ps: PointSet,
    discs: list[ObjectDisc],
    seed: int,
    beta: float = DEFAULT_BETA,
    blur_sigma: float | None = None,
) -> AugmentResult:
    """Occlusion-augment one sample deterministically.

    The paste budget is ``round(fraction * N)`` with the adaptive
    fraction from :func:`adaptive_budget` (round = floor(x + 0.5)). Each
    paste draws the occluded object uniformly, the copied object
    uniformly among its ``COPY_NEIGHBORS`` nearest points, and the two
    offset uniforms; plans whose paste center falls outside the image
    are redrawn, at most ``MAX_PLAN_ATTEMPTS`` draws per paste, then the
    paste is skipped. Images with fewer than two points come back
    unchanged (no possible donor).
    """
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("image must be a 2-D uint8 array")
    height, width = img.shape
    if (ps.width, ps.height) != (width, height):
        raise ShapeMismatchError(
            f"annotations are {ps.width}x{ps.height}, image is {width}x{height}"
        )
    if len(discs) != len(ps):
        raise ShapeMismatchError(f"{len(discs)} discs for {len(ps)} points")
    dens = render_density(discs, width, height)
    n = len(ps)
    if n < 2:
        return AugmentResult(img.copy(), ps, dens, list(discs))

    level = occlusion_level(occlusion_map(discs, width, height))
    fraction = adaptive_budget(level, beta)
    budget = int(math.floor(fraction * n + 0.5))

    rng = CounterRng(seed)
    neighbors = nearest_neighbor_indices(ps, COPY_NEIGHBORS)
    out_img = img
    out_dens = dens
    out_discs = list(discs)
    out_points = list(ps.points)
    plans: list[PastePlan] = []
    succeeded = 0
    for _ in range(budget):
        plan = None
        for _attempt in range(MAX_PLAN_ATTEMPTS):
            occ_i = rng.next_index(n)
            cand = neighbors[occ_i]
            copy_i = int(cand[rng.next_index(len(cand))])
            eps_r = rng.next_float()
            eps_theta = rng.next_float()
            px, py = paste_position(discs[occ_i], discs[copy_i], eps_r, eps_theta)
            if 0.0 <= px < width and 0.0 <= py < height:
                plan = PastePlan(occ_i, copy_i, px, py, eps_r, eps_theta)
                break
        if plan is None:
            continue
        out_img, out_dens, out_discs = apply_occlusion(
            out_img, out_dens, out_discs, plan, blur_sigma
        )
        out_points.append(Point(plan.paste_x, plan.paste_y))
        plans.append(plan)
        succeeded += 1
    return AugmentResult(
        out_img,
        PointSet(width, height, tuple(out_points)),
        out_dens,
        out_discs,
        plans,
        budget,
        succeeded,
    )
