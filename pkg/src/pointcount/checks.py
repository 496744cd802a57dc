"""Reproducible gradient-check instances for every differentiable loss.

:func:`pointcount.losses.gradcheck` requires a point where the loss is
differentiable. The builders here construct random instances and then
push them away from the non-smooth sets: l1 targets are nudged off
ties, and for the network case the layer biases are shifted so no ReLU
pre-activation sits within reach of the finite-difference step. The
adjustments only pick the evaluation point; the checked functions are
the production losses themselves.
"""

from __future__ import annotations

import numpy as np

from .losses import (
    dm_loss,
    focal_seg_loss,
    global_density_loss,
    lp_loss,
    softmax,
    softmax_vjp,
)
from .toynet import (
    ToyNet,
    _forward_batch,
    composite_on_sample,
    composite_value_on_sample,
    flatten_params,
    init_toynet,
)

GRADCHECK_H = 1e-4

# Minimum distance any ReLU pre-activation keeps from zero, and any l1
# residual keeps from a tie. 20x the step is comfortably above the
# per-coordinate movement one parameter perturbation can cause here.
_RELU_MARGIN = 2e-3
_TIE_MARGIN = 5e-3

CHECK_KINDS = ("l1", "l2", "focal-seg", "gd", "dm", "toynet")


def _case_l_p(seed: int, p: int):
    rng = np.random.default_rng(seed)
    target = rng.uniform(0.0, 1.0, size=(6, 6))
    pred = rng.uniform(0.0, 1.0, size=(6, 6))
    if p == 1:
        tied = np.abs(pred - target) < _TIE_MARGIN
        pred = np.where(tied, target + 2.0 * _TIE_MARGIN, pred)

    def fn(x):
        res = lp_loss(x, target, p)
        return res.value, res.grad

    return fn, pred, None


def _case_focal(seed: int):
    rng = np.random.default_rng(seed)
    mask = rng.integers(0, 2, size=(6, 6)).astype(np.float64)
    # Both classes must occur or one alpha weight collapses to zero and
    # the check degenerates.
    mask[0, 0] = 0.0
    mask[0, 1] = 1.0
    pred = rng.uniform(0.05, 0.95, size=(6, 6))

    def fn(x):
        res = focal_seg_loss(x, mask)
        return res.value, res.grad

    return fn, pred, None


def _case_gd(seed: int, m_levels: int):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0.0, 1.0, size=m_levels + 1)
    label = int(rng.integers(0, m_levels + 1))

    def fn(x):
        probs = softmax(x)
        res = global_density_loss(probs, label)
        return res.value, softmax_vjp(probs, res.grad)

    return fn, logits, None


def _case_dm(seed: int):
    for trial in range(64):
        rng = np.random.default_rng(seed + 100_000 * trial)
        pred = rng.uniform(0.2, 1.0, size=(8, 8))
        target = rng.uniform(0.0, 1.0, size=(8, 8))
        distilled = rng.uniform(0.1, 1.0, size=(8, 8))
        c_pred = pred.sum()
        if abs(c_pred - target.sum()) < 50.0 * GRADCHECK_H:
            continue
        mu = (pred / c_pred).ravel()
        eta = (distilled / distilled.sum()).ravel()
        if np.abs(mu - eta).min() < 50.0 * GRADCHECK_H / c_pred:
            continue
        break
    else:
        raise RuntimeError("could not build a tie-free dm instance")

    # The transport gradient comes from the converged duals, so the
    # solve runs well past the production tolerance here.
    def fn(x):
        res = dm_loss(x, target, distilled, max_iter=20000, tol=1e-8)
        return res.value, res.grad

    return fn, pred, None


def _shift_for_gap(values: np.ndarray, margin: float) -> float:
    """Smallest bias shift moving every value at least ``margin`` from 0."""
    if np.abs(values).min() >= margin:
        return 0.0
    pts = np.sort(values)
    # Candidate shifts put 0 in the middle of a gap between consecutive
    # pre-activations (or beyond either end).
    candidates = [-(pts[0] - 2.0 * margin), -(pts[-1] + 2.0 * margin)]
    for a, b in zip(pts[:-1], pts[1:]):
        if b - a > 2.2 * margin:
            candidates.append(-(a + b) / 2.0)
    feasible = [s for s in candidates if np.abs(values + s).min() >= margin]
    if not feasible:
        raise RuntimeError("no bias gap wide enough for the ReLU margin")
    return min(feasible, key=abs)


def _nudge_relu_biases(net: ToyNet, x: np.ndarray) -> ToyNet:
    """Shift biases channel-wise until no ReLU input is near zero.

    Layers are processed front to back because a shift changes every
    pre-activation downstream of it.
    """
    layer_keys = [
        ("conv1_b", "z1"),
        ("conv2_b", "z2"),
        ("conv3_b", "z3"),
        ("gate1_b", "gate_a"),
        ("gd1_b", "gd_a"),
    ]
    for bias_name, cache_key in layer_keys:
        _, _, _, cache = _forward_batch(net, x[None, None, :, :])
        pre = cache[cache_key]
        bias = getattr(net, bias_name)
        for channel in range(bias.shape[0]):
            if pre.ndim == 2:
                vals = pre[:, channel].ravel()
            else:
                vals = pre[:, channel, :, :].ravel()
            bias[channel] += _shift_for_gap(vals, _RELU_MARGIN)
    return net


def _case_toynet(seed: int, m_levels: int):
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 1.0, size=(8, 8))
    net = init_toynet(seed, m_levels)
    net = _nudge_relu_biases(net, image)

    dens, seg, _, _ = _forward_batch(net, image[None, None, :, :])
    prod = dens[0] * seg[0]
    teacher = rng.uniform(0.05, 0.6, size=(8, 8))
    tied = np.abs(prod - teacher) < _TIE_MARGIN
    teacher = np.where(tied, prod + 2.0 * _TIE_MARGIN, teacher)

    mask = rng.integers(0, 2, size=(8, 8)).astype(np.float64)
    mask[0, 0] = 0.0
    mask[0, 1] = 1.0
    label = int(rng.integers(0, m_levels + 1))

    # One reusable net whose tensors are overwritten per evaluation;
    # this avoids reallocating 18 arrays for each of the ~9k calls.
    template = net.copy()
    names = template.param_names()
    views = []
    pos = 0
    for name in names:
        arr = getattr(template, name)
        views.append((arr, slice(pos, pos + arr.size), arr.shape))
        pos += arr.size

    def _load(theta: np.ndarray) -> ToyNet:
        for arr, sl, shape in views:
            arr[...] = theta[sl].reshape(shape)
        return template

    def fn(theta):
        candidate = _load(theta)
        value, grads = composite_on_sample(candidate, image, teacher, mask, label)
        return value, np.concatenate([grads[name].ravel() for name in names])

    def value_fn(theta):
        return composite_value_on_sample(_load(theta), image, teacher, mask, label)

    return fn, flatten_params(net), value_fn


def build_gradcheck_case(kind: str, seed: int, m_levels: int = 8):
    """Return ``(fn, point, value_fn)`` for :func:`pointcount.losses.gradcheck`.

    ``value_fn`` is None when the full function is cheap enough to use
    for the perturbed evaluations.
    """
    if kind == "l1":
        return _case_l_p(seed, 1)
    if kind == "l2":
        return _case_l_p(seed, 2)
    if kind == "focal-seg":
        return _case_focal(seed)
    if kind == "gd":
        return _case_gd(seed, m_levels)
    if kind == "dm":
        return _case_dm(seed)
    if kind == "toynet":
        return _case_toynet(seed, m_levels)
    raise ValueError(f"unknown gradcheck kind {kind!r}")
