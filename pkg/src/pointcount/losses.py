"""Counting losses and their analytic gradients.

Everything here is plain float64 numpy with hand-written gradients, so
the whole stack stays checkable by central finite differences (see
:func:`gradcheck`). The pieces:

* ``lp_loss`` and its two named uses, auxiliary and distillation,
* a class-balanced focal loss for foreground segmentation,
* a focal classification loss over global-density levels,
* entropy-regularized optimal transport (log-domain Sinkhorn) and the
  distribution-matching loss built on it,
* the weighted composite of the three training terms.

All pixel reductions are means. Probabilities are clamped by ``EPS_C``
before logs; gradients are zeroed where the clamp is active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import (
    MassMismatchError,
    NonBinaryMaskError,
    NonNegativeViolationError,
    ProbsNotNormalizedError,
    ShapeMismatchError,
)

EPS_C = 1e-7

DEFAULT_GAMMA = 2.0
DEFAULT_LAMBDA_S = 0.1
DEFAULT_LAMBDA_C = 0.01
DEFAULT_LAMBDA_OT = 0.1
DEFAULT_LAMBDA_TV = 0.01
DEFAULT_REG_EPS = 1e-2
DEFAULT_SINKHORN_MAX_ITER = 500
DEFAULT_SINKHORN_TOL = 1e-6

ZERO_MASS_EPS = 1e-8


@dataclass
class LossResult:
    """A scalar loss with its gradient w.r.t. the prediction argument."""

    value: float
    grad: np.ndarray
    parts: dict[str, float] = field(default_factory=dict)
    degenerate: bool = False


@dataclass
class CompositeLoss:
    """Weighted sum of the three training terms, gradients kept per head."""

    value: float
    grad_density: np.ndarray
    grad_seg: np.ndarray
    grad_gd: np.ndarray
    parts: dict[str, float] = field(default_factory=dict)


@dataclass
class TransportPlan:
    """Converged (or budget-exhausted) entropic transport solution."""

    plan: np.ndarray
    dual_u: np.ndarray
    dual_v: np.ndarray
    value: float
    iterations: int
    converged: bool
    marginal_error: float


@dataclass
class GradcheckReport:
    """Worst-case relative disagreement between analytic and numeric grads."""

    max_rel_err: float
    worst_index: int
    n_coords: int
    rel_tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.rel_tol


def _paired(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatchError(f"pred {p.shape} vs target {t.shape}")
    if p.size == 0:
        raise ValueError("loss over an empty array is undefined")
    return p, t


def lp_loss(pred, target, p: int = 1) -> LossResult:
    """Mean elementwise l_p loss, p in {1, 2}.

    The p=1 subgradient at exact ties is 0.
    """
    a, b = _paired(pred, target)
    diff = a - b
    n = diff.size
    if p == 1:
        value = float(np.abs(diff).mean())
        grad = np.sign(diff) / n
    elif p == 2:
        value = float((diff * diff).mean())
        grad = 2.0 * diff / n
    else:
        raise ValueError(f"p must be 1 or 2, got {p}")
    return LossResult(value, grad)


def auxiliary_loss(pred, target, p: int = 1) -> LossResult:
    """Counting loss for the auxiliary model (trained on masked inputs)."""
    return lp_loss(pred, target, p)


def distillation_loss(pred, distilled_target, p: int = 1) -> LossResult:
    """Counting loss against a frozen teacher map (treated as constant)."""
    return lp_loss(pred, distilled_target, p)


def focal_seg_loss(pred_probs, gt_mask, gamma: float = DEFAULT_GAMMA) -> LossResult:
    """Class-balanced focal loss for binary foreground segmentation.

    Class weights are ``alpha_l = 1 - |class l| / |all pixels|``, so the
    rarer class weighs more. Per pixel the loss is
    ``-alpha * (1 - t)**gamma * log(t)`` with t the predicted
    probability of the true class; the result is the pixel mean.
    ``gamma = 0`` reduces to alpha-weighted cross-entropy.
    """
    pred, gt = _paired(pred_probs, gt_mask)
    if gamma < 0.0:
        raise ValueError("gamma must be >= 0")
    if pred.min() < 0.0 or pred.max() > 1.0:
        raise ValueError("pred_probs must lie in [0, 1]")
    is_fg = gt == 1.0
    is_bg = gt == 0.0
    if not np.all(is_fg | is_bg):
        raise NonBinaryMaskError("gt_mask must contain only 0 and 1")

    n = gt.size
    n_fg = float(is_fg.sum())
    alpha_fg = 1.0 - n_fg / n
    alpha_bg = 1.0 - (n - n_fg) / n
    clamped = np.clip(pred, EPS_C, 1.0 - EPS_C)
    t = np.where(is_fg, clamped, 1.0 - clamped)
    alpha = np.where(is_fg, alpha_fg, alpha_bg)

    one_minus_t = 1.0 - t
    log_t = np.log(t)
    value = float((-alpha * one_minus_t**gamma * log_t).mean())
    # d/dt of the per-pixel term, then the chain through t = pred or 1 - pred.
    dterm_dt = alpha * (gamma * one_minus_t ** (gamma - 1.0) * log_t - one_minus_t**gamma / t)
    dt_dpred = np.where(is_fg, 1.0, -1.0)
    grad = dterm_dt * dt_dpred / n
    grad = np.where((pred > EPS_C) & (pred < 1.0 - EPS_C), grad, 0.0)
    return LossResult(value, grad)


def global_density_loss(
    pred_probs, gt_level: int, gamma: float = DEFAULT_GAMMA
) -> LossResult:
    """Focal classification loss on the global-density level.

    ``-(1 - p_g)**gamma * log(p_g)`` for the true level's probability.
    The gradient is over the probability vector; callers chain it
    through their own softmax.
    """
    probs = np.asarray(pred_probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size < 1:
        raise ValueError("pred_probs must be a non-empty vector")
    if gamma < 0.0:
        raise ValueError("gamma must be >= 0")
    if probs.min() < 0.0:
        raise ProbsNotNormalizedError("probabilities must be non-negative")
    if abs(float(probs.sum()) - 1.0) > 1e-6:
        raise ProbsNotNormalizedError(f"probabilities sum to {float(probs.sum())!r}")
    if not (0 <= gt_level < probs.size):
        raise ValueError(f"gt_level {gt_level} outside [0, {probs.size})")

    p = float(probs[gt_level])
    p_safe = min(max(p, EPS_C), 1.0 - EPS_C)
    one_minus = 1.0 - p_safe
    value = float(-(one_minus**gamma) * math.log(p_safe))
    grad = np.zeros_like(probs)
    if EPS_C < p < 1.0 - EPS_C:
        grad[gt_level] = gamma * one_minus ** (gamma - 1.0) * math.log(p_safe) - one_minus**gamma / p_safe
    return LossResult(value, grad)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Backpropagate a gradient over softmax outputs to the logits."""
    inner = np.sum(grad_probs * probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def sinkhorn(
    source,
    target,
    cost,
    reg_eps: float,
    max_iter: int = DEFAULT_SINKHORN_MAX_ITER,
    tol: float = DEFAULT_SINKHORN_TOL,
) -> TransportPlan:
    """Entropy-regularized optimal transport via log-domain Sinkhorn.

    ``source`` and ``target`` are non-negative weight vectors; both are
    normalized to unit mass internally. Iterations run in the log
    domain (dual potentials), so small ``reg_eps`` values do not
    overflow. Convergence is declared when the summed L1 error of both
    marginals drops below ``tol``. Zero-weight bins are excluded from
    the solve; their plan entries and duals come back as 0.

    Returns the plan, both dual potentials (the source potential is the
    gradient of the transport value in the source weights, up to an
    additive constant), the transport value ``<plan, cost>``, and the
    iteration/convergence bookkeeping.
    """
    a = np.asarray(source, dtype=np.float64).ravel()
    b = np.asarray(target, dtype=np.float64).ravel()
    c = np.asarray(cost, dtype=np.float64)
    if c.shape != (a.size, b.size):
        raise ShapeMismatchError(f"cost {c.shape} does not match ({a.size}, {b.size})")
    if not (np.isfinite(a).all() and np.isfinite(b).all() and np.isfinite(c).all()):
        raise ValueError("sinkhorn inputs must be finite")
    if a.min(initial=0.0) < 0.0 or b.min(initial=0.0) < 0.0:
        raise NonNegativeViolationError("weights must be non-negative")
    if not (reg_eps > 0.0):
        raise ValueError("reg_eps must be > 0")
    sa, sb = float(a.sum()), float(b.sum())
    if sa <= 0.0 or sb <= 0.0:
        raise MassMismatchError("cannot normalize a zero-mass weight vector")
    a = a / sa
    b = b / sb

    ia = np.flatnonzero(a > 0.0)
    jb = np.flatnonzero(b > 0.0)
    a_s = a[ia]
    b_s = b[jb]
    c_s = c[np.ix_(ia, jb)]
    log_a = np.log(a_s)
    log_b = np.log(b_s)

    c_over = c_s / reg_eps
    work = np.empty_like(c_s)

    def update_f(g_cur: np.ndarray) -> np.ndarray:
        # f = eps * (log a - LSE((g - c)/eps, axis=1)), LSE done in place
        np.subtract(g_cur[None, :] / reg_eps, c_over, out=work)
        peak = work.max(axis=1)
        np.subtract(work, peak[:, None], out=work)
        np.exp(work, out=work)
        return reg_eps * (log_a - np.log(work.sum(axis=1))) - reg_eps * peak

    def update_g(f_cur: np.ndarray) -> np.ndarray:
        np.subtract(f_cur[:, None] / reg_eps, c_over, out=work)
        peak = work.max(axis=0)
        np.subtract(work, peak[None, :], out=work)
        np.exp(work, out=work)
        return reg_eps * (log_b - np.log(work.sum(axis=0))) - reg_eps * peak

    # One sweep updates f (making row marginals exact) then g (making
    # column marginals exact). The plan's remaining row error can be
    # read off the *next* f update: row_i = a_i * exp((f_i - f'_i)/eps),
    # so the stopping test materializes no plan, and f' is reused as
    # the next iterate.
    f = np.zeros_like(a_s)
    g = np.zeros_like(b_s)
    iterations = 0
    converged = False
    if max_iter >= 1:
        f = update_f(g)
        for iterations in range(1, max_iter + 1):
            g = update_g(f)
            f_next = update_f(g)
            err = float((a_s * np.abs(np.exp((f - f_next) / reg_eps) - 1.0)).sum())
            if err < tol:
                converged = True
                break
            f = f_next

    plan_s = np.exp((f[:, None] + g[None, :] - c_s) / reg_eps)
    marginal_error = float(
        np.abs(plan_s.sum(axis=1) - a_s).sum() + np.abs(plan_s.sum(axis=0) - b_s).sum()
    )
    plan = np.zeros_like(c)
    plan[np.ix_(ia, jb)] = plan_s
    dual_u = np.zeros_like(a)
    dual_v = np.zeros_like(b)
    dual_u[ia] = f
    dual_v[jb] = g
    value = float((plan_s * c_s).sum())
    return TransportPlan(plan, dual_u, dual_v, value, iterations, converged, marginal_error)


@lru_cache(maxsize=8)
def _grid_cost(height: int, width: int) -> np.ndarray:
    """Squared Euclidean cost between pixels, coordinates scaled to [0, 1]."""
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)
    ys = rows / (height - 1) if height > 1 else rows
    xs = cols / (width - 1) if width > 1 else cols
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1)
    diff = pts[:, None, :] - pts[None, :, :]
    return (diff * diff).sum(axis=2)


def dm_loss(
    pred,
    target,
    distilled,
    lambda_ot: float = DEFAULT_LAMBDA_OT,
    lambda_tv: float = DEFAULT_LAMBDA_TV,
    reg_eps: float = DEFAULT_REG_EPS,
    max_iter: int = DEFAULT_SINKHORN_MAX_ITER,
    tol: float = DEFAULT_SINKHORN_TOL,
) -> LossResult:
    """Distribution-matching loss over density maps.

    Three terms: an absolute count difference, entropic transport
    between the count-normalized prediction and target over the pixel
    grid (squared Euclidean cost, coordinates scaled to the unit
    square), and half the L1 distance between the count-normalized
    prediction and the count-normalized distilled map. The transport
    gradient uses the converged source potential.

    If the prediction or the target has (near-)zero mass, only the
    count term is returned and ``degenerate`` is set: the normalized
    measures the other two terms need do not exist.
    """
    p, t = _paired(pred, target)
    d = np.asarray(distilled, dtype=np.float64)
    if d.shape != p.shape:
        raise ShapeMismatchError(f"distilled {d.shape} vs pred {p.shape}")
    if p.min() < 0.0 or t.min() < 0.0 or d.min() < 0.0:
        raise NonNegativeViolationError("density maps must be non-negative")

    c_pred = float(p.sum())
    c_tgt = float(t.sum())
    l_count = abs(c_pred - c_tgt)
    sign_count = float(np.sign(c_pred - c_tgt))
    grad_count = np.full_like(p, sign_count)
    if c_pred < ZERO_MASS_EPS or c_tgt < ZERO_MASS_EPS:
        return LossResult(
            l_count, grad_count, parts={"count": l_count, "ot": 0.0, "tv": 0.0}, degenerate=True
        )
    c_dist = float(d.sum())
    if c_dist < ZERO_MASS_EPS:
        raise MassMismatchError("distilled map has zero mass")

    height, width = p.shape if p.ndim == 2 else (1, p.size)
    cost = _grid_cost(height, width)
    mu = (p / c_pred).ravel()
    nu = (t / c_tgt).ravel()
    transport = sinkhorn(mu, nu, cost, reg_eps, max_iter, tol)
    l_ot = transport.value
    f = transport.dual_u
    grad_ot = ((f - float(np.dot(f, mu))) / c_pred).reshape(p.shape)

    eta = (d / c_dist).ravel()
    tv_sign = np.sign(mu - eta)
    l_tv = 0.5 * float(np.abs(mu - eta).sum())
    grad_tv = ((tv_sign - float(np.dot(tv_sign, mu))) / (2.0 * c_pred)).reshape(p.shape)

    value = l_count + lambda_ot * l_ot + lambda_tv * l_tv
    grad = grad_count + lambda_ot * grad_ot + lambda_tv * grad_tv
    return LossResult(
        value, grad, parts={"count": l_count, "ot": l_ot, "tv": l_tv}
    )


def composite_loss(
    distill: LossResult,
    seg: LossResult,
    gd: LossResult,
    lambda_s: float = DEFAULT_LAMBDA_S,
    lambda_c: float = DEFAULT_LAMBDA_C,
) -> CompositeLoss:
    """Weighted total of the distillation, segmentation, and level terms.

    Gradients are kept per head (already scaled by their weights); the
    caller routes each to its own network output.
    """
    value = distill.value + lambda_s * seg.value + lambda_c * gd.value
    return CompositeLoss(
        value=value,
        grad_density=distill.grad,
        grad_seg=lambda_s * seg.grad,
        grad_gd=lambda_c * gd.grad,
        parts={
            "distill": distill.value,
            "seg": seg.value,
            "gd": gd.value,
        },
    )


def gradcheck(
    loss_fn,
    point: np.ndarray,
    rel_tol: float = 1e-4,
    h: float = 1e-4,
    scale_floor: float = 1e-4,
    value_fn=None,
) -> GradcheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` maps a float64 array to ``(value, grad)``. Every
    coordinate is perturbed by ``+-h``; the disagreement at coordinate i
    is ``|num - ana| / max(|num|, |ana|, scale_floor)``, i.e. relative
    for entries large against ``scale_floor`` and absolute below it.
    The caller must pick a point where the loss is differentiable
    (away from l1 ties, clamps, and kinks).

    ``value_fn``, when given, must return the same scalar as
    ``loss_fn`` without the gradient; the perturbed evaluations use it,
    which matters when the backward pass dominates the cost.
    """
    x0 = np.asarray(point, dtype=np.float64)
    _, analytic = loss_fn(x0)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x0.shape:
        raise ShapeMismatchError(f"grad {analytic.shape} vs point {x0.shape}")
    if value_fn is None:
        value_fn = lambda x: loss_fn(x)[0]  # noqa: E731
    flat = x0.ravel()
    ana = analytic.ravel()
    max_rel = 0.0
    worst = -1
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        f_plus = value_fn(bumped.reshape(x0.shape))
        bumped[i] = flat[i] - h
        f_minus = value_fn(bumped.reshape(x0.shape))
        numeric = (f_plus - f_minus) / (2.0 * h)
        rel = abs(numeric - ana[i]) / max(abs(numeric), abs(ana[i]), scale_floor)
        if rel > max_rel:
            max_rel = rel
            worst = i
    return GradcheckReport(max_rel, worst, flat.size, rel_tol)
