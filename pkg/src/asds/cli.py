"""Command-line interface: ``asds train|degrade|restore|evaluate``.

Exit status is 0 on success, 2 for invalid arguments or inputs and 1 for
runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from collections import Counter
from pathlib import Path

from . import imaging, training
from .adaptive import NLConfig
from .solver import SolverConfig, SolverError, restore

log = logging.getLogger("asds")

TASK_KERNELS = {"deblur": "uniform:9", "sr": "gauss:1.6:7"}
TASK_SCALES = {"deblur": 1, "sr": 3}


class UsageError(Exception):
    pass


def _nonneg_float(text):
    v = float(text)
    if not v >= 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a finite value >= 0, got {text}")
    return v


def _pos_float(text):
    v = float(text)
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a finite value > 0, got {text}")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _kernel(text):
    try:
        imaging.make_kernel(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _existing_file(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p


def _output_path(path):
    p = Path(path)
    if not p.parent.is_dir():
        raise UsageError(f"output directory does not exist: {p.parent}")
    return p


# ---------------------------------------------------------------------------

def cmd_train(args):
    img_dir = Path(args.images)
    if not img_dir.is_dir():
        raise UsageError(f"not a directory: {img_dir}")
    out = _output_path(args.out)
    images = [imaging.load_image(p) for p in sorted(img_dir.glob("*.pgm"))]
    cfg = training.TrainConfig(
        patch_size=args.patch_size, delta=args.delta, clusters=args.clusters,
        min_cluster=args.min_cluster, lambda_rank=args.lambda_rank,
        max_patches=args.max_patches, energy_fraction=args.energy, seed=args.seed,
    )
    if not images:
        raise UsageError("no qualifying patches (no .pgm images found)")
    model = training.train(images, cfg)
    training.save_model(model, out)
    print(f"patches={model.train_patches}")
    print(f"clusters={model.K}")
    print(f"projector_dim={model.projector.shape[0]}")
    hist = Counter(model.ranks)
    print("rank_histogram=" + ",".join(f"{r}:{hist[r]}" for r in sorted(hist)))
    return 0


def cmd_degrade(args):
    src = _existing_file(args.input)
    out = _output_path(args.out)
    x = imaging.load_image(src)
    d = imaging.Degradation(imaging.make_kernel(args.kernel), args.scale, args.noise_sigma)
    y = imaging.apply_DH(x, d)
    y = imaging.add_noise(y, args.noise_sigma, args.seed)
    imaging.save_image(y, out)
    print(f"wrote {out} ({y.shape[1]}x{y.shape[0]})")
    return 0


def solver_config(args):
    """Preset for the task and noise level, with explicit flags layered on top."""
    if args.task == "deblur":
        cfg = SolverConfig.deblur()
    else:
        cfg = SolverConfig.super_resolution(args.noise_sigma)
    overrides = {
        "gamma": args.gamma, "eta": args.eta, "tau_div": args.tau_div,
        "tau_numerator": args.tau_numerator, "eps": args.eps,
        "refresh_period": args.refresh_period, "tol": args.tol, "max_iter": args.max_iter,
    }
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    if args.tau_rule is not None:
        cfg.tau_rule = args.tau_rule
    if args.safe_step:
        cfg.safe_step = True
    cfg.nl = NLConfig(count=args.nl_count, search_radius=args.nl_radius, cutoff=args.nl_cutoff)
    cfg.__post_init__()
    return cfg


def cmd_restore(args):
    src = _existing_file(args.input)
    model_path = _existing_file(args.model)
    out = _output_path(args.out)
    diag_path = _output_path(args.diagnostics or out.with_suffix(".csv"))
    model = training.load_model(model_path)
    if args.patch_size is not None and args.patch_size != model.patch_size:
        raise UsageError(
            f"model patch size {model.patch_size} does not match --patch-size {args.patch_size}"
        )
    kernel = args.kernel or TASK_KERNELS[args.task]
    scale = args.scale or TASK_SCALES[args.task]
    d = imaging.Degradation(imaging.make_kernel(kernel), scale, args.noise_sigma)
    cfg = solver_config(args)
    y = imaging.load_image(src)
    print(
        f"task={args.task} kernel={kernel} scale={scale} noise_sigma={args.noise_sigma:g} "
        f"gamma={cfg.gamma:g} eta={cfg.eta:g} tau_rule={cfg.tau_rule} "
        f"tau_div={cfg.tau_div:g} tau_numerator={cfg.tau_numerator:g}"
    )
    x, diag = restore(y, d, model, cfg)
    imaging.save_image(x, out)
    diag.to_csv(diag_path)
    print(f"iterations={diag.iterations} refreshes={diag.refreshes} converged={diag.converged}")
    return 0


def cmd_evaluate(args):
    ref = imaging.load_image(_existing_file(args.reference))
    test = imaging.load_image(_existing_file(args.test))
    if ref.shape != test.shape:
        raise UsageError(f"dimension mismatch: {ref.shape} vs {test.shape}")
    try:
        p = f"{imaging.psnr(ref, test):.4f}"
    except imaging.IdenticalImagesError:
        p = "inf"
    print(f"PSNR={p} SSIM={imaging.ssim(ref, test):.6f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="asds", description="Image deblurring and super-resolution with adaptive sub-dictionaries."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn sub-dictionaries and AR models")
    p.add_argument("--images", required=True, help="directory of PGM training images")
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=_pos_int, default=200)
    p.add_argument("--min-cluster", type=_pos_int, default=300)
    p.add_argument("--patch-size", type=int, default=7)
    p.add_argument("--delta", type=_nonneg_float, default=16.0,
                   help="minimum patch variance")
    p.add_argument("--lambda-rank", type=_nonneg_float, default=0.5)
    p.add_argument("--max-patches", type=_pos_int, default=100_000)
    p.add_argument("--energy", type=_pos_float, default=0.95,
                   help="centroid energy kept by the selection projector")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("degrade", help="blur, decimate and add noise")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kernel", type=_kernel, required=True,
                   help="delta | uniform:SIZE | gauss:SIGMA[:SIZE] (default size ~ +-4 sigma)")
    p.add_argument("--scale", type=_pos_int, default=1)
    p.add_argument("--noise-sigma", type=_nonneg_float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("restore", help="deblur or super-resolve an image")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--task", choices=["deblur", "sr"], default="deblur")
    p.add_argument("--kernel", type=_kernel,
                   help="blur kernel; defaults to uniform:9 (deblur) or gauss:1.6:7 (sr). "
                        "A gauss kernel without SIZE uses ~ +-4 sigma support (25 for sigma 3)")
    p.add_argument("--scale", type=_pos_int, help="decimation factor (default 1 deblur, 3 sr)")
    p.add_argument("--noise-sigma", type=_nonneg_float, default=0.0)
    p.add_argument("--patch-size", type=int, help="expected model patch size")
    p.add_argument("--diagnostics", help="CSV path (default: OUT with .csv suffix)")
    p.add_argument("--gamma", type=_nonneg_float)
    p.add_argument("--eta", type=_nonneg_float)
    p.add_argument("--tau-rule", choices=["map", "fixed"])
    p.add_argument("--tau-div", type=_pos_float)
    p.add_argument("--tau-numerator", type=_nonneg_float)
    p.add_argument("--eps", type=_pos_float)
    p.add_argument("--refresh-period", type=_pos_int)
    p.add_argument("--tol", type=_pos_float)
    p.add_argument("--max-iter", type=_pos_int)
    p.add_argument("--safe-step", action="store_true")
    p.add_argument("--nl-count", type=_pos_int, default=10)
    p.add_argument("--nl-radius", type=_pos_int, default=12)
    p.add_argument("--nl-cutoff", type=_nonneg_float)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("evaluate", help="PSNR and SSIM of a test image")
    p.add_argument("--reference", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
