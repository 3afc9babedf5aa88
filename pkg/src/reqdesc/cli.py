"""Command-line entry point: ``reqdesc <command> [flags]``.

Exit codes: 0 ok, 2 config or I/O error, 3 runtime failure, 4 extraction
failure, 5 descriptor dimension mismatch, 6 self-check tolerance exceeded.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Settings, default_settings, dump_config, load_config, parse_config
from .errors import (ConfigError, DimMismatchError, FormatError, OutOfBoundsError, ReqError,
                     TooFewKeypointsError, ZeroVectorError)

log = logging.getLogger("reqdesc")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_EXTRACT, EXIT_DIM, EXIT_TOLERANCE = 0, 2, 3, 4, 5, 6


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def _settings(path) -> Settings:
    return load_config(path) if path else default_settings()


def load_model(path):
    from .eqnn import Backbone, load_parameters, read_checkpoint

    p = Path(path)
    if not p.is_file():
        raise CommandError(EXIT_CONFIG, f"model checkpoint {p} not found")
    text, tensors = read_checkpoint(p)
    settings = parse_config(text)
    model = Backbone(settings.train.backbone)
    load_parameters(model, tensors)
    return settings, model


def read_homography(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise CommandError(EXIT_CONFIG, f"homography file {p} not found")
    vals = p.read_text().split()
    if len(vals) != 9:
        raise CommandError(EXIT_CONFIG, f"{p}: expected 9 reals, found {len(vals)}")
    try:
        return np.array([float(v) for v in vals]).reshape(3, 3)
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, f"{p}: {exc}") from None


def read_keypoints(path) -> np.ndarray:
    """Whitespace-separated ``x y`` per line; ``#`` comments allowed."""
    p = Path(path)
    if not p.is_file():
        raise CommandError(EXIT_CONFIG, f"keypoint file {p} not found")
    rows = []
    for line in p.read_text().splitlines():
        line = line.split("#", 1)[0].split()
        if line:
            rows.append([float(line[0]), float(line[1])])
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def _thresholds(text: str) -> tuple[float, ...]:
    try:
        ts = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise CommandError(EXIT_CONFIG, f"bad thresholds {text!r}") from None
    if not ts or any(t <= 0 for t in ts):
        raise CommandError(EXIT_CONFIG, "thresholds must be positive")
    return ts


def _square_crop(img: np.ndarray, size: int, multiple: int) -> np.ndarray:
    h, w = img.shape
    side = min(h, w, size)
    side -= side % multiple
    if side < multiple:
        raise CommandError(EXIT_CONFIG, f"image {h}x{w} too small")
    oy, ox = (h - side) // 2, (w - side) // 2
    return img[oy:oy + side, ox:ox + side]


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from .datagen import list_images
    from .trainer import train

    settings = _settings(args.config)
    corpus = Path(args.corpus)
    if not corpus.is_dir():
        raise CommandError(EXIT_CONFIG, f"corpus directory {corpus} does not exist")
    list_images(corpus)
    if args.seed is not None:
        settings.train.seed = args.seed
    text = dump_config(settings)
    report = train(corpus, settings.train, args.out, config_text=text, resume=args.resume)
    report_path = Path(args.report or str(args.out) + ".json")
    report_path.write_text(report.to_json(include_time=False) + "\n")
    if args.plot:
        from .plotting import plot_losses

        plot_losses(report.total, report.orientation, report.descriptor, args.plot)
    print(f"trained {len(report.total)} iterations in {report.wall_time:.1f}s -> {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from .datagen import harris_keypoints, read_image
    from .invmap import write_descriptors
    from .matcheval import pyramid_descriptors
    from .orientation import CandidateConfig

    settings, model = load_model(args.model)
    if not Path(args.image).is_file():
        raise CommandError(EXIT_CONFIG, f"image {args.image} not found")
    img = read_image(args.image)
    multiple = int(np.prod(model.cfg.strides))
    if img.shape[0] % multiple or img.shape[1] % multiple:
        raise CommandError(EXIT_EXTRACT, f"image {img.shape} not divisible by stride {multiple}")
    if args.keypoints == "harris":
        n = args.num_keypoints or settings.eval.num_keypoints
        xy = harris_keypoints(img, n, settings.train.pair.harris).xy
    else:
        xy = read_keypoints(args.keypoints)
    ratio = settings.candidates.candidate_ratio if args.candidates is None else args.candidates
    kmax = settings.candidates.candidate_kmax if args.candidates is not None else 1
    try:
        cand = CandidateConfig(ratio, kmax)
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None
    pyramid = settings.pyramid if settings.use_pyramid else None
    ds = pyramid_descriptors(model, img, xy, args.method, pyramid, cand)
    if len(ds) == 0 and len(xy):
        raise CommandError(EXIT_EXTRACT, "no keypoint produced a descriptor")
    write_descriptors(args.out, ds)
    print(f"{len(ds)} descriptors of dim {ds.dim} from {len(xy)} keypoints -> {args.out}")
    return EXIT_OK


def cmd_match(args) -> int:
    from .invmap import read_descriptors
    from .matcheval import EvalConfig, hestimation, matched_keypoints, mma, mutual_nn_match, reprojection_errors

    for p in (args.a, args.b):
        if not Path(p).is_file():
            raise CommandError(EXIT_CONFIG, f"descriptor file {p} not found")
    set_a, set_b = read_descriptors(args.a), read_descriptors(args.b)
    if set_a.dim != set_b.dim:
        raise CommandError(EXIT_DIM, f"descriptor dims differ: {set_a.dim} vs {set_b.dim}")
    ts = _thresholds(args.thresholds)
    m = mutual_nn_match(set_a.desc, set_b.desc)
    # keypoint coordinates indexed by keypoint id
    kp_a = _coords_by_id(set_a)
    kp_b = _coords_by_id(set_b)
    pairs = matched_keypoints(m, set_a, set_b)
    sims = {}
    for i, j, s in zip(set_a.keypoint_ids[m.idx_a], set_b.keypoint_ids[m.idx_b], m.similarity):
        sims[(int(i), int(j))] = max(float(s), sims.get((int(i), int(j)), -np.inf))
    h_gt = read_homography(args.h_gt) if args.h_gt else None
    err = reprojection_errors(pairs, kp_a, kp_b, h_gt) if h_gt is not None else None
    out = Path(args.out)
    with out.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        head = ["kp_a", "kp_b", "xa", "ya", "xb", "yb", "similarity"]
        if h_gt is not None:
            head += ["error"] + [f"correct@{t:g}" for t in ts]
        wr.writerow(head)
        for n, (i, j) in enumerate(pairs):
            row = [i, j, f"{kp_a[i, 0]:.3f}", f"{kp_a[i, 1]:.3f}", f"{kp_b[j, 0]:.3f}", f"{kp_b[j, 1]:.3f}",
                   f"{sims[(int(i), int(j))]:.6f}"]
            if h_gt is not None:
                row += [f"{err[n]:.4f}"] + [int(err[n] <= t) for t in ts]
            wr.writerow(row)
    summary = {"matches": int(len(pairs)), "descriptors_a": len(set_a), "descriptors_b": len(set_b)}
    if h_gt is not None:
        acc, correct, n = mma(pairs, kp_a, kp_b, h_gt, ts)
        shape = _shape_hint(args.image_size, kp_a)
        ecfg = EvalConfig()
        hest = hestimation(pairs, kp_a, kp_b, h_gt, shape, ecfg.hest_eps, ecfg.ransac)
        summary.update({
            "mma": {f"{t:g}": acc[t] for t in ts},
            "correct": {f"{t:g}": correct[t] for t in ts},
            "hest_pass": hest.passed,
            "corner_err": hest.corner_error if np.isfinite(hest.corner_error) else None,
            "inliers": hest.inliers,
            "ransac_seed": ecfg.ransac.seed,
        })
    out.with_suffix(".json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def _coords_by_id(ds) -> np.ndarray:
    n = int(ds.keypoint_ids.max()) + 1 if len(ds) else 0
    xy = np.full((n, 2), np.nan)
    xy[ds.keypoint_ids] = ds.xy
    return xy


def _shape_hint(text, kp) -> tuple[int, int]:
    if text:
        try:
            w, h = (int(v) for v in text.lower().split("x"))
        except ValueError:
            raise CommandError(EXIT_CONFIG, f"bad --image-size {text!r}; use WxH") from None
        return h, w
    finite = kp[np.isfinite(kp).all(axis=1)]
    return (int(finite[:, 1].max()) + 1, int(finite[:, 0].max()) + 1) if len(finite) else (1, 1)


def cmd_bench_roto(args) -> int:
    from .datagen import list_images, read_image
    from .matcheval import ROTO_ANGLES, build_roto_benchmark, run_benchmark
    from .orientation import CandidateConfig
    from .plotting import plot_angle_curves

    settings, model = load_model(args.model)
    if args.config:
        settings = load_config(args.config)
    files = list_images(args.images)
    multiple = int(np.prod(model.cfg.strides))
    imgs = [_square_crop(read_image(f), settings.bench_size, multiple) for f in files]
    angles = ROTO_ANGLES if not args.angles else tuple(float(a) for a in args.angles.split(","))
    bench = build_roto_benchmark(imgs, angles)
    ecfg = settings.eval
    if args.candidates is not None:
        ecfg.candidates = CandidateConfig(args.candidates, settings.candidates.candidate_kmax)
    else:
        ecfg.candidates = CandidateConfig(settings.candidates.candidate_ratio, 1)
    if args.thresholds:
        ecfg.thresholds = _thresholds(args.thresholds)
    report = run_benchmark(model, bench, ecfg, args.method, args.protocol, gt_delta=args.gt_delta)
    out = Path(args.out)
    report.write(out)
    t = 5.0 if 5.0 in ecfg.thresholds else ecfg.thresholds[0]
    curve = {a: v[t] for a, v in report.per_angle().items()}
    plot_angle_curves({args.method: curve}, out / "angles.png", t)
    print(json.dumps(report.summary()))
    return EXIT_OK


def cmd_check_equivariance(args) -> int:
    from .eqnn import Backbone, equivariance_error

    settings = _settings(args.config)
    cfg = settings.train.backbone
    if args.seed is not None:
        cfg.init_seed = args.seed
    if cfg.group_order % 4:
        raise CommandError(EXIT_CONFIG, f"quarter-turn check needs |G| divisible by 4, got {cfg.group_order}")
    model = Backbone(cfg)
    rng = np.random.default_rng(cfg.init_seed)
    worst = 0.0
    for i in range(settings.check_inputs):
        img = rng.random((settings.check_size, settings.check_size)).astype(np.float32)
        for q in (1, 2, 3):
            worst = max(worst, equivariance_error(model, img, q))
    ok = worst <= settings.equivariance_tol
    print(f"|G|={cfg.group_order} inputs={settings.check_inputs} max equivariance error {worst:.3e} "
          f"(tol {settings.equivariance_tol:g}) -> {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_TOLERANCE


def gradient_problem(settings: Settings, seed: int = 0):
    """Loss closure over a small rotated pair for the finite-difference check."""
    from .datagen import TrainingPair, project, rotation_homography, synthetic_texture, warp_image
    from .eqnn import Backbone
    from .trainer import pair_loss

    cfg = settings.train.backbone
    model = Backbone(cfg)
    n = settings.grad_size
    rng = np.random.default_rng(seed)
    src = synthetic_texture(rng, n, "blobs")
    c = (n - 1) / 2.0
    hmat = rotation_homography(90.0, (c, c))
    tgt, mask = warp_image(src, hmat)
    lo, hi = 3.0, n - 4.0
    kp_a = rng.uniform(lo, hi, size=(settings.grad_keypoints, 2))
    pair = TrainingPair(src, tgt, hmat, 90.0, kp_a, project(hmat, kp_a), mask)
    loss_cfg = settings.train.loss

    def closure(tape):
        total, _, _ = pair_loss(model, tape, pair, loss_cfg)
        return total

    return model, closure


def cmd_check_grad(args) -> int:
    from .autodiff import check_gradients

    settings = _settings(args.config)
    model, closure = gradient_problem(settings, args.seed or 0)
    report = check_gradients(closure, model.parameters, eps=args.eps, tol=settings.grad_tol,
                             max_coords=settings.grad_coords, seed=args.seed or 0,
                             corrupt=args.corrupt_gradient)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_TOLERANCE


def cmd_info(args) -> int:
    if args.model:
        settings, model = load_model(args.model)
    else:
        from .eqnn import Backbone

        settings = _settings(args.config)
        model = Backbone(settings.train.backbone)
    cfg = model.cfg
    print(f"reqdesc {__version__}")
    print(f"group order      {cfg.group_order}")
    print(f"widths           {cfg.widths}")
    print(f"pyramid layers   {cfg.pyramid_layers}")
    print(f"channels C       {cfg.channels}")
    print(f"descriptor dim   {cfg.descriptor_dim}")
    print(f"feature stride   {cfg.feature_stride}")
    print(f"parameters       {sum(p.size for p in model.parameters)}")
    if args.dump:
        sys.stdout.write(dump_config(settings))
    return EXIT_OK


def cmd_synth_corpus(args) -> int:
    from .datagen import write_synthetic_corpus

    paths = write_synthetic_corpus(args.out, args.count, args.size, args.seed)
    print(f"wrote {len(paths)} images to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reqdesc", description="Rotation-equivariant local descriptors.")
    ap.add_argument("--threads", type=int, default=int(os.environ.get("REQ_THREADS", "0")) or None,
                    help="BLAS thread cap (default $REQ_THREADS); 1 gives bit-reproducible runs")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a backbone on a directory of PGM/PPM images")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")
    p.add_argument("--report", help="report JSON path (default: OUT.json)")
    p.add_argument("--plot", help="write a loss-curve PNG here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write descriptors for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--keypoints", default="harris", help="'harris' or a file of 'x y' lines")
    p.add_argument("--num-keypoints", type=int)
    p.add_argument("--method", choices=("align", "avg", "max", "none"), default="align")
    p.add_argument("--candidates", type=float, help="candidate ratio; omit for a single orientation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("match", help="mutual nearest-neighbour matching of two descriptor files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--h-gt")
    p.add_argument("--thresholds", default="3,5,10")
    p.add_argument("--image-size", help="WxH used for the corner error (default: keypoint extent)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("bench-roto", help="rotated-pair benchmark over a directory of images")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--protocol", choices=("gt", "pred"), default="pred")
    p.add_argument("--method", choices=("align", "avg", "max", "none"), default="align")
    p.add_argument("--gt-delta", action="store_true", help="align with the ground-truth shift")
    p.add_argument("--candidates", type=float)
    p.add_argument("--angles", help="comma-separated degrees (default 0,10,...,350)")
    p.add_argument("--thresholds")
    p.add_argument("--config", help="override evaluation settings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_roto)

    p = sub.add_parser("check-equivariance", help="quarter-turn equivariance of a random model")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_check_equivariance)

    p = sub.add_parser("check-grad", help="finite-difference check of the full training loss")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--corrupt-gradient", nargs="?", const="conv2d", metavar="PRIMITIVE",
                   help="scale one primitive's backward pass (negative control)")
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("info", help="describe a checkpoint or config")
    p.add_argument("--model")
    p.add_argument("--config")
    p.add_argument("--dump", action="store_true", help="print the full key = value config")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("synth-corpus", help="write procedural texture images")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=12)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_corpus)
    return ap


def _limits(threads):
    if not threads:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _limits(args.threads):
            return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DimMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIM
    except (ConfigError, FormatError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ZeroVectorError, OutOfBoundsError, TooFewKeypointsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXTRACT if args.command == "extract" else EXIT_RUNTIME
    except (ReqError, FloatingPointError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
