"""A miniature counting network, trained with hand-written backprop.

The point of this module is not accuracy but verifiability: a small
convolutional network whose every gradient is written out by hand in
float64 so the whole training objective can be validated with central
finite differences, and whose training pipeline exercises the rest of
the library (rendered density targets, focus masks, occlusion
augmentation, the composite loss) end to end on synthetic scenes.

Architecture, fixed: three 3x3 same-padding conv layers with ReLU and
channel widths (8, 16, 16); then, from the last feature map,

* a density head: 1x1 conv + softplus (gated, see below),
* a segmentation head: 1x1 conv + sigmoid,
* a global-density head: global average pool, two FC layers, softmax,
* a channel gate: the same pooled vector through two FC layers and a
  sigmoid, multiplied channel-wise into the feature map *before* the
  density head. Forcing the gate to ones reproduces the ungated
  forward pass bit for bit.

Training stages:

* ``aux``: plain l_p on density, inputs pre-multiplied by the ground
  truth foreground mask (the privileged teacher),
* ``baseline``: plain l_p on density, raw inputs,
* ``distill``: l_p between the mask-gated prediction
  ``density * seg`` and the frozen teacher's output on the masked
  input, plus the weighted focal segmentation and global-density terms.

Optimization is plain minibatch SGD with a fixed learning rate; all
randomness flows through the counter RNG, so runs are reproducible
bit for bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .annot import Point, PointSet, fixed_sigmas
from .density import render_density
from .errors import (
    BadMagicError,
    EmptyDatasetError,
    MissingAuxiliaryError,
    SizeMismatchError,
    VersionMismatchError,
)
from .focus import DEFAULT_M_LEVELS, density_step, global_density_label, seg_mask
from .losses import (
    DEFAULT_LAMBDA_C,
    DEFAULT_LAMBDA_S,
    composite_loss,
    focal_seg_loss,
    global_density_loss,
    lp_loss,
    softmax,
    softmax_vjp,
)
from .occsim import DEFAULT_BETA, augment_sample
from .rng import CounterRng, derive_seed

MODEL_MAGIC = b"PCNT"
MODEL_VERSION = 1

MIN_SIDE = 8
_CONV_CHANNELS = (8, 16, 16)
_HIDDEN = 16


@dataclass
class ToyNet:
    """All learnable tensors, in serialization order."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    conv3_w: np.ndarray
    conv3_b: np.ndarray
    gate1_w: np.ndarray
    gate1_b: np.ndarray
    gate2_w: np.ndarray
    gate2_b: np.ndarray
    dens_w: np.ndarray
    dens_b: np.ndarray
    seg_w: np.ndarray
    seg_b: np.ndarray
    gd1_w: np.ndarray
    gd1_b: np.ndarray
    gd2_w: np.ndarray
    gd2_b: np.ndarray

    @property
    def m_levels(self) -> int:
        return self.gd2_b.shape[0] - 1

    def param_names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def copy(self) -> "ToyNet":
        return ToyNet(**{name: getattr(self, name).copy() for name in self.param_names()})


def _param_shapes(m_levels: int) -> list[tuple[str, tuple[int, ...]]]:
    c1, c2, c3 = _CONV_CHANNELS
    k = m_levels + 1
    return [
        ("conv1_w", (c1, 1, 3, 3)),
        ("conv1_b", (c1,)),
        ("conv2_w", (c2, c1, 3, 3)),
        ("conv2_b", (c2,)),
        ("conv3_w", (c3, c2, 3, 3)),
        ("conv3_b", (c3,)),
        ("gate1_w", (_HIDDEN, c3)),
        ("gate1_b", (_HIDDEN,)),
        ("gate2_w", (c3, _HIDDEN)),
        ("gate2_b", (c3,)),
        ("dens_w", (1, c3)),
        ("dens_b", (1,)),
        ("seg_w", (1, c3)),
        ("seg_b", (1,)),
        ("gd1_w", (_HIDDEN, c3)),
        ("gd1_b", (_HIDDEN,)),
        ("gd2_w", (k, _HIDDEN)),
        ("gd2_b", (k,)),
    ]


def _normal(rng: CounterRng, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normal draws via Box-Muller on the counter stream."""
    n = int(np.prod(shape)) if shape else 1
    out = np.empty(n, dtype=np.float64)
    for i in range(0, n, 2):
        u1 = max(rng.next_float(), 1e-300)
        u2 = rng.next_float()
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        if i + 1 < n:
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)
    return out.reshape(shape)


def init_toynet(seed: int, m_levels: int = DEFAULT_M_LEVELS) -> ToyNet:
    """He-style random initialization; biases start at zero."""
    if m_levels < 1:
        raise ValueError("m_levels must be >= 1")
    rng = CounterRng(seed)
    params = {}
    for name, shape in _param_shapes(m_levels):
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=np.float64)
            continue
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            std = math.sqrt(2.0 / fan_in)
        else:
            fan_in = shape[1]
            # Heads and gate/level MLPs: unit-variance-preserving scale.
            std = math.sqrt(1.0 / fan_in)
        params[name] = std * _normal(rng, shape)
    return ToyNet(**params)


def zero_toynet(m_levels: int = DEFAULT_M_LEVELS) -> ToyNet:
    """All-zero parameters; useful as a fixed reference state."""
    return ToyNet(
        **{name: np.zeros(shape, dtype=np.float64) for name, shape in _param_shapes(m_levels)}
    )


def flatten_params(net: ToyNet) -> np.ndarray:
    return np.concatenate([getattr(net, name).ravel() for name in net.param_names()])


def unflatten_params(net: ToyNet, flat: np.ndarray) -> ToyNet:
    """Rebuild a net with ``flat`` sliced into this net's shapes."""
    out = {}
    pos = 0
    for name in net.param_names():
        shape = getattr(net, name).shape
        size = int(np.prod(shape)) if shape else 1
        out[name] = np.asarray(flat[pos : pos + size], dtype=np.float64).reshape(shape)
        pos += size
    if pos != flat.size:
        raise SizeMismatchError(f"flat vector has {flat.size} entries, expected {pos}")
    return ToyNet(**out)


# ---------------------------------------------------------------------------
# forward / backward


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, H*W) patches of the 3x3 neighborhood."""
    b, c, h, w = x.shape
    padded = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    padded[:, :, 1 : 1 + h, 1 : 1 + w] = x
    cols = np.empty((b, c, 9, h * w), dtype=x.dtype)
    tap = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, tap, :] = padded[:, :, dy : dy + h, dx : dx + w].reshape(b, c, h * w)
            tap += 1
    return cols.reshape(b, c * 9, h * w)


def _col2im3(dcols: np.ndarray, b: int, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`_im2col3`."""
    view = dcols.reshape(b, c, 9, h * w)
    dpadded = np.zeros((b, c, h + 2, w + 2), dtype=dcols.dtype)
    tap = 0
    for dy in range(3):
        for dx in range(3):
            dpadded[:, :, dy : dy + h, dx : dx + w] += view[:, :, tap, :].reshape(b, c, h, w)
            tap += 1
    return dpadded[:, :, 1 : 1 + h, 1 : 1 + w]


def _conv3_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    b, c, h, w = x.shape
    cols = _im2col3(x)
    wmat = weight.reshape(weight.shape[0], -1)
    out = np.matmul(wmat, cols) + bias[None, :, None]
    return out.reshape(b, weight.shape[0], h, w), cols


def _conv3_backward(dout: np.ndarray, cols: np.ndarray, weight: np.ndarray, x_shape):
    b, c, h, w = x_shape
    dflat = dout.reshape(b, weight.shape[0], h * w)
    wmat = weight.reshape(weight.shape[0], -1)
    dw = np.einsum("bop,bkp->ok", dflat, cols).reshape(weight.shape)
    db = dflat.sum(axis=(0, 2))
    dcols = np.matmul(wmat.T, dflat)
    dx = _col2im3(dcols, b, c, h, w)
    return dw, db, dx


def _conv1x1_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    out = np.matmul(weight, x.reshape(b, c, h * w)) + bias[None, :, None]
    return out.reshape(b, weight.shape[0], h, w)


def _conv1x1_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray):
    b, c, h, w = x.shape
    dflat = dout.reshape(b, weight.shape[0], h * w)
    xflat = x.reshape(b, c, h * w)
    dw = np.einsum("bop,bcp->oc", dflat, xflat)
    db = dflat.sum(axis=(0, 2))
    dx = np.matmul(weight.T, dflat).reshape(b, c, h, w)
    return dw, db, dx


@dataclass
class ForwardResult:
    """Outputs of one image: density map, seg probabilities, level probs."""

    density: np.ndarray
    seg: np.ndarray
    gd_probs: np.ndarray


def _forward_batch(net: ToyNet, x: np.ndarray, force_unit_gate: bool = False):
    """Batched forward pass. ``x`` is (B, 1, H, W) float64.

    Returns the per-head outputs and the cache needed by
    :func:`_backward_batch`.
    """
    b, _, h, w = x.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"images must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
    z1, cols1 = _conv3_forward(x, net.conv1_w, net.conv1_b)
    h1 = _relu(z1)
    z2, cols2 = _conv3_forward(h1, net.conv2_w, net.conv2_b)
    h2 = _relu(z2)
    z3, cols3 = _conv3_forward(h2, net.conv3_w, net.conv3_b)
    feats = _relu(z3)

    pool = feats.mean(axis=(2, 3))
    gate_a = pool @ net.gate1_w.T + net.gate1_b
    gate_h = _relu(gate_a)
    gate_z = gate_h @ net.gate2_w.T + net.gate2_b
    gate = _sigmoid(gate_z)
    gate_eff = np.ones_like(gate) if force_unit_gate else gate
    gated = feats * gate_eff[:, :, None, None]

    dens_lin = _conv1x1_forward(gated, net.dens_w, net.dens_b)
    density = _softplus(dens_lin)
    seg_lin = _conv1x1_forward(feats, net.seg_w, net.seg_b)
    seg = _sigmoid(seg_lin)

    gd_a = pool @ net.gd1_w.T + net.gd1_b
    gd_h = _relu(gd_a)
    logits = gd_h @ net.gd2_w.T + net.gd2_b
    probs = softmax(logits)

    cache = {
        "x": x,
        "z1": z1,
        "h1": h1,
        "z2": z2,
        "h2": h2,
        "z3": z3,
        "feats": feats,
        "cols1": cols1,
        "cols2": cols2,
        "cols3": cols3,
        "pool": pool,
        "gate_a": gate_a,
        "gate_h": gate_h,
        "gate": gate,
        "gated": gated,
        "dens_lin": dens_lin,
        "seg": seg,
        "gd_a": gd_a,
        "gd_h": gd_h,
        "probs": probs,
        "forced": force_unit_gate,
    }
    return density[:, 0], seg[:, 0], probs, cache


def _backward_batch(
    net: ToyNet,
    cache: dict,
    d_density: np.ndarray,
    d_seg: np.ndarray,
    d_logits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given the per-head output gradients."""
    x = cache["x"]
    b, _, h, w = x.shape
    feats = cache["feats"]

    d_dens_lin = d_density[:, None, :, :] * _sigmoid(cache["dens_lin"])
    dWd, dbd, d_gated = _conv1x1_backward(d_dens_lin, cache["gated"], net.dens_w)

    seg = cache["seg"]
    d_seg_lin = d_seg[:, None, :, :] * seg * (1.0 - seg)
    dWs, dbs, d_feats_seg = _conv1x1_backward(d_seg_lin, feats, net.seg_w)

    dWc2 = d_logits.T @ cache["gd_h"]
    dbc2 = d_logits.sum(axis=0)
    d_gd_h = d_logits @ net.gd2_w
    d_gd_a = d_gd_h * (cache["gd_a"] > 0.0)
    dWc1 = d_gd_a.T @ cache["pool"]
    dbc1 = d_gd_a.sum(axis=0)
    d_pool = d_gd_a @ net.gd1_w

    if cache["forced"]:
        d_feats_gate = d_gated
        dWg1 = np.zeros_like(net.gate1_w)
        dbg1 = np.zeros_like(net.gate1_b)
        dWg2 = np.zeros_like(net.gate2_w)
        dbg2 = np.zeros_like(net.gate2_b)
    else:
        gate = cache["gate"]
        d_gate = (d_gated * feats).sum(axis=(2, 3))
        d_feats_gate = d_gated * gate[:, :, None, None]
        d_gate_z = d_gate * gate * (1.0 - gate)
        dWg2 = d_gate_z.T @ cache["gate_h"]
        dbg2 = d_gate_z.sum(axis=0)
        d_gate_h = d_gate_z @ net.gate2_w
        d_gate_a = d_gate_h * (cache["gate_a"] > 0.0)
        dWg1 = d_gate_a.T @ cache["pool"]
        dbg1 = d_gate_a.sum(axis=0)
        d_pool = d_pool + d_gate_a @ net.gate1_w

    d_feats = d_feats_seg + d_feats_gate + d_pool[:, :, None, None] / (h * w)
    d_z3 = d_feats * (cache["z3"] > 0.0)
    dW3, db3, d_h2 = _conv3_backward(d_z3, cache["cols3"], net.conv3_w, cache["h2"].shape)
    d_z2 = d_h2 * (cache["z2"] > 0.0)
    dW2, db2, d_h1 = _conv3_backward(d_z2, cache["cols2"], net.conv2_w, cache["h1"].shape)
    d_z1 = d_h1 * (cache["z1"] > 0.0)
    dW1, db1, _ = _conv3_backward(d_z1, cache["cols1"], net.conv1_w, x.shape)

    return {
        "conv1_w": dW1,
        "conv1_b": db1,
        "conv2_w": dW2,
        "conv2_b": db2,
        "conv3_w": dW3,
        "conv3_b": db3,
        "gate1_w": dWg1,
        "gate1_b": dbg1,
        "gate2_w": dWg2,
        "gate2_b": dbg2,
        "dens_w": dWd,
        "dens_b": dbd,
        "seg_w": dWs,
        "seg_b": dbs,
        "gd1_w": dWc1,
        "gd1_b": dbc1,
        "gd2_w": dWc2,
        "gd2_b": dbc2,
    }


def image_to_input(image: np.ndarray) -> np.ndarray:
    """uint8 image to the float64 [0, 1] network input."""
    return np.asarray(image, dtype=np.float64) / 255.0


def forward(net: ToyNet, image: np.ndarray, force_unit_gate: bool = False) -> ForwardResult:
    """Run one float64 image (values expected in [0, 1]) through the net."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("forward expects a single 2-D image")
    density, seg, probs, _ = _forward_batch(
        net, arr[None, None, :, :], force_unit_gate=force_unit_gate
    )
    return ForwardResult(density[0], seg[0], probs[0])


def forward_many(net: ToyNet, images: np.ndarray, chunk: int = 50):
    """Forward a stack of images (N, H, W); returns stacked head outputs."""
    xs = np.asarray(images, dtype=np.float64)
    dens, segs, probs = [], [], []
    for start in range(0, xs.shape[0], chunk):
        part = xs[start : start + chunk]
        d, s, p, _ = _forward_batch(net, part[:, None, :, :])
        dens.append(d)
        segs.append(s)
        probs.append(p)
    return np.concatenate(dens), np.concatenate(segs), np.concatenate(probs)


def predict_density(net: ToyNet, image01: np.ndarray, masked_output: bool = False) -> np.ndarray:
    """Predicted density map; with ``masked_output`` the map is gated by
    the predicted segmentation (the distilled model's output contract)."""
    res = forward(net, image01)
    return res.density * res.seg if masked_output else res.density


def predict_count(net: ToyNet, image01: np.ndarray, masked_output: bool = False) -> float:
    return float(predict_density(net, image01, masked_output).sum(dtype=np.float64))


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic counting scene."""

    size: int = 32
    n_objects: int = 5
    radius_min: float = 2.0
    radius_max: float = 4.0
    clutter: float = 1.0
    seed: int = 0


def _value_noise(rng: CounterRng, size: int, cells: int = 4) -> np.ndarray:
    """Bilinearly interpolated lattice noise in [0, 1]."""
    lattice = np.array(
        [[rng.next_float() for _ in range(cells + 1)] for _ in range(cells + 1)],
        dtype=np.float64,
    )
    u = np.arange(size, dtype=np.float64) * cells / size
    i0 = np.minimum(u.astype(int), cells - 1)
    t = u - i0
    rows = lattice[:, i0] * (1.0 - t) + lattice[:, i0 + 1] * t
    out = rows[i0, :] * (1.0 - t)[:, None] + rows[i0 + 1, :] * t[:, None]
    return out


def synth_scene(spec: SceneSpec) -> tuple[np.ndarray, PointSet]:
    """Deterministic synthetic scene: bright discs on cluttered ground.

    Objects are filled discs with intensities in [200, 255]; the
    background mixes lattice noise with a few soft distractor blobs in
    [60, 140] whose contrast scales with ``spec.clutter``. Object
    centers keep a margin of one pixel from the border and at least
    1.5 px of separation (best effort, so dense scenes stay possible).
    """
    if spec.size < MIN_SIDE:
        raise ValueError(f"scene size must be >= {MIN_SIDE}")
    if spec.n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    if not (0.0 < spec.radius_min <= spec.radius_max):
        raise ValueError("need 0 < radius_min <= radius_max")
    rng = CounterRng(spec.seed)
    size = spec.size
    canvas = _value_noise(rng, size) * 80.0 * spec.clutter

    yy, xx = np.meshgrid(
        np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij"
    )
    n_blobs = int(round(3.0 * spec.clutter))
    for _ in range(n_blobs):
        bx = rng.next_float() * size
        by = rng.next_float() * size
        br = 1.5 + rng.next_float() * 2.5
        bi = 60.0 + rng.next_float() * 80.0
        d2 = (xx - bx) ** 2 + (yy - by) ** 2
        profile = np.maximum(0.0, 1.0 - d2 / (br * br))
        canvas = np.maximum(canvas, bi * profile)

    margin = 1.0
    centers: list[tuple[float, float]] = []
    for _ in range(spec.n_objects):
        for _attempt in range(20):
            cx = margin + rng.next_float() * (size - 2.0 * margin)
            cy = margin + rng.next_float() * (size - 2.0 * margin)
            if all((cx - ox) ** 2 + (cy - oy) ** 2 >= 1.5**2 for ox, oy in centers):
                break
        centers.append((cx, cy))
        radius = spec.radius_min + rng.next_float() * (spec.radius_max - spec.radius_min)
        intensity = 200.0 + rng.next_float() * 55.0
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
        canvas[inside] = intensity

    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    points = PointSet(size, size, tuple(Point(cx, cy) for cx, cy in centers))
    return image, points


# ---------------------------------------------------------------------------
# training


@dataclass
class ToySample:
    """One training example: the image and its point annotations."""

    image: np.ndarray
    points: PointSet


def synth_dataset(
    n: int,
    seed: int,
    size: int = 32,
    objects_min: int = 2,
    objects_max: int = 8,
    radius_min: float = 2.0,
    radius_max: float = 4.0,
    clutter: float = 1.0,
) -> list[ToySample]:
    """Generate ``n`` scenes with object counts uniform on the range.

    Scene ``i`` is fully determined by ``derive_seed(seed, i)``, so
    datasets are stable under changes of ``n``.
    """
    if objects_min < 0 or objects_max < objects_min:
        raise ValueError("need 0 <= objects_min <= objects_max")
    count_rng = CounterRng(derive_seed(seed, 777))
    out = []
    for i in range(n):
        k = objects_min + count_rng.next_index(objects_max - objects_min + 1)
        image, points = synth_scene(
            SceneSpec(size, k, radius_min, radius_max, clutter, derive_seed(seed, i))
        )
        out.append(ToySample(image, points))
    return out


@dataclass
class TrainConfig:
    stage: str = "baseline"  # "aux" | "baseline" | "distill"
    epochs: int = 20
    learning_rate: float = 0.2
    batch_size: int = 10
    p: int = 1
    lambda_s: float = DEFAULT_LAMBDA_S
    lambda_c: float = DEFAULT_LAMBDA_C
    use_occlusion_aug: bool = False
    beta: float = DEFAULT_BETA
    sigma: float = 2.0
    m_levels: int = DEFAULT_M_LEVELS
    seed: int = 0


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    best_epoch: int | None = None


@dataclass
class _Prepared:
    x: np.ndarray
    density: np.ndarray
    mask: np.ndarray
    label: int


def _prepare(
    image: np.ndarray, points: PointSet, sigma: float, step: float, m_levels: int,
    density: np.ndarray | None = None, discs=None,
) -> _Prepared:
    if discs is None:
        discs = fixed_sigmas(points, sigma)
    if density is None:
        density = render_density(discs, points.width, points.height)
    mask = seg_mask(discs, points.width, points.height)
    label = global_density_label(len(points), step, m_levels)
    return _Prepared(image_to_input(image), density, mask, label)


def _epoch_data(
    samples: list[ToySample], cfg: TrainConfig, step: float, epoch: int
) -> list[_Prepared]:
    out = []
    for i, sample in enumerate(samples):
        if cfg.use_occlusion_aug:
            discs = fixed_sigmas(sample.points, cfg.sigma)
            aug = augment_sample(
                sample.image,
                sample.points,
                discs,
                seed=derive_seed(cfg.seed, epoch * len(samples) + i),
                beta=cfg.beta,
            )
            out.append(
                _prepare(
                    aug.image, aug.points, cfg.sigma, step, cfg.m_levels,
                    density=aug.density, discs=aug.discs,
                )
            )
        else:
            out.append(_prepare(sample.image, sample.points, cfg.sigma, step, cfg.m_levels))
    return out


def _shuffled(n: int, rng: CounterRng) -> list[int]:
    """Fisher-Yates permutation driven by the counter stream."""
    idx = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.next_index(i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def _stage_inputs(batch: list[_Prepared], stage: str) -> np.ndarray:
    if stage == "aux":
        return np.stack([pr.x * pr.mask for pr in batch])
    return np.stack([pr.x for pr in batch])


def _batch_loss_and_grads(
    net: ToyNet, batch: list[_Prepared], cfg: TrainConfig, teacher: np.ndarray | None
):
    b = len(batch)
    x = _stage_inputs(batch, cfg.stage)
    dens, seg, probs, cache = _forward_batch(net, x[:, None, :, :])
    if cfg.stage in ("aux", "baseline"):
        target = np.stack([pr.density for pr in batch])
        res = lp_loss(dens, target, cfg.p)
        value = res.value
        d_dens = res.grad
        d_seg = np.zeros_like(seg)
        d_logits = np.zeros_like(probs)
    elif cfg.stage == "distill":
        res = lp_loss(dens * seg, teacher, cfg.p)
        d_dens = res.grad * seg
        d_seg = res.grad * dens
        d_probs = np.zeros_like(probs)
        seg_total = 0.0
        gd_total = 0.0
        for i, pr in enumerate(batch):
            sres = focal_seg_loss(seg[i], pr.mask)
            seg_total += sres.value
            d_seg[i] += cfg.lambda_s * sres.grad / b
            gres = global_density_loss(probs[i], pr.label)
            gd_total += gres.value
            d_probs[i] = cfg.lambda_c * gres.grad / b
        d_logits = softmax_vjp(probs, d_probs)
        value = res.value + cfg.lambda_s * seg_total / b + cfg.lambda_c * gd_total / b
    else:
        raise ValueError(f"unknown stage {cfg.stage!r}")
    grads = _backward_batch(net, cache, d_dens, d_seg, d_logits)
    return value, grads


def _val_mae(net: ToyNet, val_prep: list[_Prepared], stage: str) -> float:
    xs = _stage_inputs(val_prep, stage)
    dens, seg, _ = forward_many(net, xs)
    pred = dens * seg if stage == "distill" else dens
    counts = pred.sum(axis=(1, 2), dtype=np.float64)
    gt = np.array([float(pr.density.sum(dtype=np.float64)) for pr in val_prep])
    return float(np.abs(counts - gt).mean())


def train(
    samples,
    cfg: TrainConfig,
    frozen_aux: ToyNet | None = None,
    val_samples=None,
) -> tuple[ToyNet, TrainHistory]:
    """Train a fresh net on ``samples`` per the configured stage.

    Targets (density maps, masks, level labels) are derived from the
    annotations with the fixed kernel width ``cfg.sigma``; the level
    quantization step is fitted on the unaugmented training set. With
    ``use_occlusion_aug`` every sample is re-augmented each epoch under
    its own derived seed. The distill stage requires ``frozen_aux``,
    whose outputs on mask-multiplied inputs are the distillation
    targets. For the aux stage the returned net is the best-validation
    checkpoint (when a validation set is given); other stages return
    the final epoch.
    """
    samples = list(samples)
    if not samples:
        raise EmptyDatasetError("train needs at least one sample")
    if cfg.stage not in ("aux", "baseline", "distill"):
        raise ValueError(f"unknown stage {cfg.stage!r}")
    if cfg.stage == "distill" and frozen_aux is None:
        raise MissingAuxiliaryError("distill stage needs the frozen auxiliary net")
    if cfg.p not in (1, 2):
        raise ValueError("p must be 1 or 2")

    step = density_step(
        [(s.points, float(s.points.width * s.points.height)) for s in samples],
        cfg.m_levels,
    )
    net = init_toynet(derive_seed(cfg.seed, 101), cfg.m_levels)
    static_prep = None
    if not cfg.use_occlusion_aug:
        static_prep = [
            _prepare(s.image, s.points, cfg.sigma, step, cfg.m_levels) for s in samples
        ]
    val_prep = None
    if val_samples is not None:
        val_prep = [
            _prepare(s.image, s.points, cfg.sigma, step, cfg.m_levels) for s in val_samples
        ]

    static_teacher = None
    if cfg.stage == "distill" and static_prep is not None:
        masked = np.stack([pr.x * pr.mask for pr in static_prep])
        static_teacher, _, _ = forward_many(frozen_aux, masked)

    history = TrainHistory()
    best_mae = math.inf
    best_params: ToyNet | None = None
    shuffle_rng = CounterRng(derive_seed(cfg.seed, 202))
    n = len(samples)
    for epoch in range(cfg.epochs):
        if static_prep is not None:
            prep = static_prep
            teacher_all = static_teacher
        else:
            prep = _epoch_data(samples, cfg, step, epoch)
            teacher_all = None
            if cfg.stage == "distill":
                masked = np.stack([pr.x * pr.mask for pr in prep])
                teacher_all, _, _ = forward_many(frozen_aux, masked)

        order = _shuffled(n, shuffle_rng)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = [prep[i] for i in idx]
            teacher = teacher_all[idx] if teacher_all is not None else None
            value, grads = _batch_loss_and_grads(net, batch, cfg, teacher)
            if cfg.learning_rate != 0.0:
                for name in net.param_names():
                    getattr(net, name)[...] -= cfg.learning_rate * grads[name]
            total += value * len(idx)
        history.train_loss.append(total / n)

        if val_prep is not None:
            mae = _val_mae(net, val_prep, cfg.stage)
            history.val_mae.append(mae)
            if cfg.stage == "aux" and mae < best_mae:
                best_mae = mae
                best_params = net.copy()
                history.best_epoch = epoch

    if cfg.stage == "aux" and best_params is not None:
        net = best_params
    return net, history


def composite_on_sample(
    net: ToyNet,
    image01: np.ndarray,
    teacher_map: np.ndarray,
    gt_mask: np.ndarray,
    gt_label: int,
    p: int = 1,
    lambda_s: float = DEFAULT_LAMBDA_S,
    lambda_c: float = DEFAULT_LAMBDA_C,
):
    """Composite training loss of one sample and its parameter gradients.

    This is the full distill-stage objective: the l_p distillation term
    on ``density * seg``, the focal segmentation term, and the
    global-density term, combined by :func:`pointcount.losses.composite_loss`.
    Returns ``(value, {param_name: grad})``.
    """
    dens, seg, probs, cache = _forward_batch(net, image01[None, None, :, :])
    dist_res = lp_loss(dens[0] * seg[0], teacher_map, p)
    seg_res = focal_seg_loss(seg[0], gt_mask)
    gd_res = global_density_loss(probs[0], gt_label)
    comp = composite_loss(dist_res, seg_res, gd_res, lambda_s, lambda_c)
    d_dens = (comp.grad_density * seg[0])[None]
    d_seg = (comp.grad_density * dens[0] + comp.grad_seg)[None]
    d_logits = softmax_vjp(probs, comp.grad_gd[None, :])
    grads = _backward_batch(net, cache, d_dens, d_seg, d_logits)
    return comp.value, grads


def composite_value_on_sample(
    net: ToyNet,
    image01: np.ndarray,
    teacher_map: np.ndarray,
    gt_mask: np.ndarray,
    gt_label: int,
    p: int = 1,
    lambda_s: float = DEFAULT_LAMBDA_S,
    lambda_c: float = DEFAULT_LAMBDA_C,
) -> float:
    """Value of :func:`composite_on_sample` without the backward pass."""
    dens, seg, probs, _ = _forward_batch(net, image01[None, None, :, :])
    dist_res = lp_loss(dens[0] * seg[0], teacher_map, p)
    seg_res = focal_seg_loss(seg[0], gt_mask)
    gd_res = global_density_loss(probs[0], gt_label)
    return composite_loss(dist_res, seg_res, gd_res, lambda_s, lambda_c).value


# ---------------------------------------------------------------------------
# model files


def save_model(path, net: ToyNet) -> None:
    """Write the tensor list: magic, u32 version, then per tensor a u32
    rank, u32 dims, and little-endian float32 data."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        for name in net.param_names():
            arr = np.ascontiguousarray(getattr(net, name), dtype="<f4")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_model(path) -> ToyNet:
    """Read a model file back; parameters are promoted to float64."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != MODEL_MAGIC:
        raise BadMagicError("not a model file (bad magic)")
    if len(buf) < 8:
        raise SizeMismatchError("model file truncated in the version field")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"unsupported model version {version}")

    tensors: list[np.ndarray] = []
    pos = 8
    while pos < len(buf):
        if pos + 4 > len(buf):
            raise SizeMismatchError("model file truncated in a tensor header")
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if rank < 1 or rank > 4:
            raise SizeMismatchError(f"implausible tensor rank {rank}")
        if pos + 4 * rank > len(buf):
            raise SizeMismatchError("model file truncated in a tensor shape")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = 1
        for d in dims:
            n *= d
        if pos + 4 * n > len(buf):
            raise SizeMismatchError("model file truncated in tensor data")
        data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos)
        pos += 4 * n
        tensors.append(data.reshape(dims).astype(np.float64))

    expected_count = len(_param_shapes(DEFAULT_M_LEVELS))
    if len(tensors) != expected_count:
        raise SizeMismatchError(
            f"model file holds {len(tensors)} tensors, expected {expected_count}"
        )
    k = tensors[-1].shape[0]
    if k < 2 or tensors[-2].shape != (k, _HIDDEN):
        raise SizeMismatchError("global-density head tensors are inconsistent")
    expected = _param_shapes(k - 1)
    params = {}
    for (name, shape), tensor in zip(expected, tensors):
        if tensor.shape != shape:
            raise SizeMismatchError(f"{name}: file has {tensor.shape}, expected {shape}")
        params[name] = tensor
    return ToyNet(**params)
