"""Command line front end.

Thin plumbing only: every subcommand loads files, calls one library
function, writes files, and prints a single result line (floats printed
via ``repr`` so reruns are byte-identical). Exit codes: 0 on success, 1
for usage problems, 2 for malformed or missing data.

``--config FILE`` reads ``key=value`` lines (``#`` comments allowed)
and treats them as defaults for the subcommand's long options;
explicit command line flags win. Boolean switches take true/false.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .annot import (
    DEFAULT_K,
    DEFAULT_SCALE,
    estimate_sigmas,
    fixed_sigmas,
    load_annotations,
    save_annotations,
)
from .checks import CHECK_KINDS, build_gradcheck_case
from .density import count, render_density
from .errors import DataError, MalformedFileError, ShapeMismatchError
from .focus import (
    DEFAULT_M_LEVELS,
    density_step,
    global_density_label,
    occlusion_level,
    occlusion_map,
    seg_mask,
)
from .losses import (
    DEFAULT_GAMMA,
    DEFAULT_LAMBDA_C,
    DEFAULT_LAMBDA_OT,
    DEFAULT_LAMBDA_S,
    DEFAULT_LAMBDA_TV,
    DEFAULT_REG_EPS,
    DEFAULT_SINKHORN_MAX_ITER,
    DEFAULT_SINKHORN_TOL,
    dm_loss,
    focal_seg_loss,
    global_density_loss,
    gradcheck,
    lp_loss,
)
from .metrics import (
    OCCLUSION_THRESHOLD,
    crowding_split,
    mae_rmse,
    occlusion_split,
    read_records,
)
from .occsim import DEFAULT_BETA, augment_sample
from .raster import read_pfm, read_pgm, write_pfm, write_pgm
from .rng import derive_seed
from .toynet import (
    SceneSpec,
    TrainConfig,
    image_to_input,
    load_model,
    predict_count,
    predict_density,
    save_model,
    synth_dataset,
    synth_scene,
    train,
)

_GRADCHECK_TOLS = {
    "l1": 1e-4,
    "l2": 1e-6,
    "focal-seg": 1e-4,
    "gd": 1e-4,
    "dm": 1e-3,
    "toynet": 1e-3,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting itself,
    so main() can map them to exit code 1."""

    def error(self, message):
        raise _UsageError(message)


def _sigma_policy(text: str):
    if text == "adaptive":
        return "adaptive"
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected 'adaptive' or a positive number, got {text!r}"
        ) from None
    if not value > 0.0:
        raise argparse.ArgumentTypeError("fixed sigma must be > 0")
    return value


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key=value file of option defaults")
    sub.add_argument(
        "--verbose", action="store_true", help="print the resolved options to stderr"
    )


def _add_sigma_options(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--sigma",
        type=_sigma_policy,
        default="adaptive",
        help="'adaptive' (neighbor-based) or a fixed kernel width",
    )
    sub.add_argument("--k", type=int, default=DEFAULT_K, help="neighbors for adaptive sigma")
    sub.add_argument(
        "--scale", type=float, default=DEFAULT_SCALE, help="adaptive sigma scale factor"
    )


def _discs_for(args, ps):
    if args.sigma == "adaptive":
        return estimate_sigmas(ps, args.k, args.scale)
    return fixed_sigmas(ps, args.sigma)


def _cmd_densify(args) -> int:
    ps = load_annotations(args.annotations)
    density = render_density(_discs_for(args, ps), ps.width, ps.height)
    write_pfm(args.out, density)
    print(f"n={len(ps)} count={count(density)!r}")
    return 0


def _cmd_segmask(args) -> int:
    ps = load_annotations(args.annotations)
    mask = seg_mask(_discs_for(args, ps), ps.width, ps.height)
    write_pgm(args.out, (mask * 255.0).astype(np.uint8))
    print(f"n={len(ps)} foreground={float(mask.mean())!r}")
    return 0


def _cmd_occmap(args) -> int:
    ps = load_annotations(args.annotations)
    occ = occlusion_map(_discs_for(args, ps), ps.width, ps.height)
    write_pfm(args.out, occ)
    print(f"n={len(ps)} level={occlusion_level(occ)!r}")
    return 0


def _cmd_occlevel(args) -> int:
    ps = load_annotations(args.annotations)
    occ = occlusion_map(_discs_for(args, ps), ps.width, ps.height)
    print(repr(occlusion_level(occ)))
    return 0


def _cmd_gdstep(args) -> int:
    dataset = []
    for path in args.annotations:
        ps = load_annotations(path)
        area = args.patch_area if args.patch_area is not None else float(ps.width * ps.height)
        dataset.append((ps, area))
    print(repr(density_step(dataset, args.m_levels)))
    return 0


def _cmd_gdlabel(args) -> int:
    print(global_density_label(args.count, args.step, args.m_levels))
    return 0


def _cmd_occlude(args) -> int:
    image = read_pgm(args.image)
    ps = load_annotations(args.annotations)
    result = augment_sample(
        image, ps, _discs_for(args, ps), args.seed, args.beta, args.blur_sigma
    )
    write_pgm(args.out_image, result.image)
    save_annotations(args.out_annotations, result.points)
    if args.out_density:
        write_pfm(args.out_density, result.density)
    print(
        f"attempted={result.attempted} succeeded={result.succeeded} "
        f"n={len(result.points)} count={count(result.density)!r}"
    )
    return 0


def _cmd_loss(args) -> int:
    pred = read_pfm(args.pred)
    if args.kind in ("l1", "l2"):
        res = lp_loss(pred, read_pfm(args.target), 1 if args.kind == "l1" else 2)
    elif args.kind == "focal-seg":
        mask = read_pgm(args.target).astype(np.float64) / 255.0
        res = focal_seg_loss(pred, mask, args.gamma)
    elif args.kind == "gd":
        if args.gt_level is None:
            raise _UsageError("--gt-level is required for kind 'gd'")
        if pred.shape[0] != 1:
            raise ShapeMismatchError(
                f"gd expects a single-row probability map, got {pred.shape}"
            )
        res = global_density_loss(pred[0], args.gt_level, args.gamma)
    else:  # dm
        if args.distilled is None:
            raise _UsageError("--distilled is required for kind 'dm'")
        res = dm_loss(
            pred,
            read_pfm(args.target),
            read_pfm(args.distilled),
            args.lambda_ot,
            args.lambda_tv,
            args.reg_eps,
            args.max_iter,
            args.tol,
        )
    parts = " ".join(f"{k}={v!r}" for k, v in sorted(res.parts.items()))
    line = f"kind={args.kind} value={res.value!r}"
    if parts:
        line += f" {parts}"
    if res.degenerate:
        line += " degenerate=true"
    print(line)
    return 0


def _cmd_gradcheck(args) -> int:
    tol = args.rel_tol if args.rel_tol is not None else _GRADCHECK_TOLS[args.kind]
    fn, point, value_fn = build_gradcheck_case(args.kind, args.seed, args.m_levels)
    report = gradcheck(fn, point, rel_tol=tol, value_fn=value_fn)
    status = "pass" if report.passed else "FAIL"
    print(
        f"kind={args.kind} seed={args.seed} coords={report.n_coords} "
        f"max_rel_err={report.max_rel_err:.3e} rel_tol={tol:.1e} status={status}"
    )
    return 0


def _cmd_synth(args) -> int:
    spec = SceneSpec(
        args.size, args.objects, args.radius_min, args.radius_max, args.clutter, args.seed
    )
    image, ps = synth_scene(spec)
    write_pgm(args.out_image, image)
    save_annotations(args.out_annotations, ps)
    print(f"n={len(ps)} size={args.size}")
    return 0


def _cmd_train_toy(args) -> int:
    if args.stage == "distill" and args.aux is None:
        raise _UsageError("--aux MODEL is required for the distill stage")
    samples = synth_dataset(
        args.scenes,
        derive_seed(args.seed, 0),
        args.size,
        args.objects_min,
        args.objects_max,
        args.radius_min,
        args.radius_max,
        args.clutter,
    )
    val = None
    if args.val_scenes > 0:
        val = synth_dataset(
            args.val_scenes,
            derive_seed(args.seed, 1),
            args.size,
            args.objects_min,
            args.objects_max,
            args.radius_min,
            args.radius_max,
            args.clutter,
        )
    cfg = TrainConfig(
        stage=args.stage,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        p=args.p,
        lambda_s=args.lambda_s,
        lambda_c=args.lambda_c,
        use_occlusion_aug=args.occlusion_aug,
        beta=args.beta,
        sigma=args.sigma,
        m_levels=args.m_levels,
        seed=args.seed,
    )
    frozen = load_model(args.aux) if args.aux is not None else None
    net, hist = train(samples, cfg, frozen_aux=frozen, val_samples=val)
    save_model(args.out, net)
    if args.verbose:
        for i, loss_value in enumerate(hist.train_loss):
            line = f"epoch {i} loss={loss_value!r}"
            if i < len(hist.val_mae):
                line += f" val_mae={hist.val_mae[i]!r}"
            print(line, file=sys.stderr)
    fields = [f"stage={args.stage}", f"final_loss={hist.train_loss[-1]!r}"]
    if hist.val_mae:
        fields.append(f"val_mae={hist.val_mae[-1]!r}")
    if hist.best_epoch is not None:
        fields.append(f"best_epoch={hist.best_epoch}")
    print(" ".join(fields))
    return 0


def _cmd_infer(args) -> int:
    net = load_model(args.model)
    image01 = image_to_input(read_pgm(args.image))
    if args.out_density:
        write_pfm(args.out_density, predict_density(net, image01, args.masked_output))
    print(f"count={predict_count(net, image01, args.masked_output)!r}")
    return 0


def _split_line(name: str, records) -> str:
    if not records:
        return f"{name} n=0"
    mae, rmse = mae_rmse(records)
    return f"{name} n={len(records)} mae={mae!r} rmse={rmse!r}"


def _cmd_eval(args) -> int:
    records = read_records(args.records)
    print(_split_line("overall", records))
    if args.split == "occlusion":
        low, high = occlusion_split(records, args.threshold)
        print(_split_line("low", low))
        print(_split_line("high", high))
    elif args.split == "crowding":
        for name, part in zip(("sparse", "medium", "dense"), crowding_split(records)):
            print(_split_line(name, part))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="pointcount", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = subs.add_parser("densify", help="render a density map")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="output PFM path")
    _add_sigma_options(p)
    _add_common(p)
    p.set_defaults(func=_cmd_densify)

    p = subs.add_parser("segmask", help="render the foreground mask")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="output PGM path")
    _add_sigma_options(p)
    _add_common(p)
    p.set_defaults(func=_cmd_segmask)

    p = subs.add_parser("occmap", help="render the occlusion map")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="output PFM path")
    _add_sigma_options(p)
    _add_common(p)
    p.set_defaults(func=_cmd_occmap)

    p = subs.add_parser("occlevel", help="print the occlusion level")
    p.add_argument("--annotations", required=True)
    _add_sigma_options(p)
    _add_common(p)
    p.set_defaults(func=_cmd_occlevel)

    p = subs.add_parser(
        "gdstep", help="fit the global-density quantization step"
    )
    p.add_argument("--annotations", required=True, nargs="+")
    p.add_argument(
        "--patch-area",
        type=float,
        default=None,
        help="reference patch area (default: each image's full area)",
    )
    p.add_argument("--m-levels", type=int, default=DEFAULT_M_LEVELS)
    _add_common(p)
    p.set_defaults(func=_cmd_gdstep)

    p = subs.add_parser("gdlabel", help="quantize a count to a level")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--step", type=float, required=True)
    p.add_argument("--m-levels", type=int, default=DEFAULT_M_LEVELS)
    _add_common(p)
    p.set_defaults(func=_cmd_gdlabel)

    p = subs.add_parser(
        "occlude", help="apply occlusion-simulating augmentation"
    )
    p.add_argument("--image", required=True, help="input PGM path")
    p.add_argument("--annotations", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--blur-sigma", type=float, default=None)
    p.add_argument("--out-image", required=True)
    p.add_argument("--out-annotations", required=True)
    p.add_argument("--out-density", default=None)
    _add_sigma_options(p)
    _add_common(p)
    p.set_defaults(func=_cmd_occlude)

    p = subs.add_parser("loss", help="evaluate a loss on map files")
    p.add_argument("--kind", required=True, choices=("l1", "l2", "focal-seg", "gd", "dm"))
    p.add_argument("--pred", required=True, help="prediction PFM")
    p.add_argument("--target", required=True, help="target PFM (PGM mask for focal-seg)")
    p.add_argument("--distilled", default=None, help="distilled PFM (dm only)")
    p.add_argument("--gt-level", type=int, default=None, help="true level (gd only)")
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--lambda-ot", type=float, default=DEFAULT_LAMBDA_OT)
    p.add_argument("--lambda-tv", type=float, default=DEFAULT_LAMBDA_TV)
    p.add_argument("--reg-eps", type=float, default=DEFAULT_REG_EPS)
    p.add_argument("--max-iter", type=int, default=DEFAULT_SINKHORN_MAX_ITER)
    p.add_argument("--tol", type=float, default=DEFAULT_SINKHORN_TOL)
    _add_common(p)
    p.set_defaults(func=_cmd_loss)

    p = subs.add_parser(
        "gradcheck", help="finite-difference gradient check"
    )
    p.add_argument("--kind", required=True, choices=CHECK_KINDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rel-tol", type=float, default=None, help="override the per-kind default")
    p.add_argument("--m-levels", type=int, default=DEFAULT_M_LEVELS)
    _add_common(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = subs.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--objects", type=int, default=5)
    p.add_argument("--radius-min", type=float, default=2.0)
    p.add_argument("--radius-max", type=float, default=4.0)
    p.add_argument("--clutter", type=float, default=1.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-image", required=True)
    p.add_argument("--out-annotations", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = subs.add_parser(
        "train-toy", help="train the reference net on synthetic scenes"
    )
    p.add_argument("--stage", required=True, choices=("aux", "baseline", "distill"))
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--p", type=int, default=1, choices=(1, 2))
    p.add_argument("--lambda-s", type=float, default=DEFAULT_LAMBDA_S)
    p.add_argument("--lambda-c", type=float, default=DEFAULT_LAMBDA_C)
    p.add_argument("--occlusion-aug", action="store_true")
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--sigma", type=float, default=2.0, help="density kernel width")
    p.add_argument("--m-levels", type=int, default=DEFAULT_M_LEVELS)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--val-scenes", type=int, default=50)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--objects-min", type=int, default=2)
    p.add_argument("--objects-max", type=int, default=8)
    p.add_argument("--radius-min", type=float, default=2.0)
    p.add_argument("--radius-max", type=float, default=4.0)
    p.add_argument("--clutter", type=float, default=1.0)
    p.add_argument("--aux", default=None, help="frozen teacher model (distill stage)")
    p.add_argument("--out", required=True, help="output model path")
    _add_common(p)
    p.set_defaults(func=_cmd_train_toy)

    p = subs.add_parser("infer", help="predict a count for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="input PGM path")
    p.add_argument("--masked-output", action="store_true", help="gate density by seg head")
    p.add_argument("--out-density", default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_infer)

    p = subs.add_parser("eval", help="summarize an evaluation CSV")
    p.add_argument("--records", required=True)
    p.add_argument("--split", choices=("occlusion", "crowding"), default=None)
    p.add_argument("--threshold", type=float, default=OCCLUSION_THRESHOLD)
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    return parser


def _config_tokens(path: str) -> list[str]:
    tokens: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not eq or not key:
                raise MalformedFileError(f"{path}:{lineno}: expected key=value, got {line!r}")
            if key == "config":
                raise MalformedFileError(f"{path}:{lineno}: config files cannot nest")
            flag = "--" + key.replace("_", "-")
            if value.lower() in ("true", "yes", "on"):
                tokens.append(flag)
            elif value.lower() in ("false", "no", "off"):
                continue
            else:
                tokens.extend([flag, value])
    return tokens


def _without_config_flag(tokens: list[str]) -> list[str]:
    out: list[str] = []
    skip = False
    for tok in tokens:
        if skip:
            skip = False
            continue
        if tok == "--config":
            skip = True
            continue
        if tok.startswith("--config="):
            continue
        out.append(tok)
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        if getattr(args, "config", None):
            merged = [argv[0]] + _config_tokens(args.config) + _without_config_flag(argv[1:])
            args = parser.parse_args(merged)
        if getattr(args, "verbose", False):
            for key in sorted(vars(args)):
                if key in ("func", "command", "verbose", "config"):
                    continue
                print(f"option {key}={getattr(args, key)!r}", file=sys.stderr)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
