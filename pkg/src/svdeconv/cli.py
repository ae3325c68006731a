"""Command-line entry point wiring the full pipeline.

Subcommands: psf, dataset, map, deconvolve, metrics, benchmark. Results go
to standard output, diagnostics to standard error. Exit codes: 0 success,
1 domain/processing error, 2 usage error. Worker parallelism is capped by
``--threads`` or the DECONV_THREADS environment variable (flag wins).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, datagen, deconv, psfmap
from .errors import SvDeconvError
from .estimator import DictionaryEstimator, build_dictionary, load_external_model
from .fileio import read_image, save_image, write_psf_preview, write_psfraw
from .imageops import compute_metrics
from .optics import PupilGrid, synthesize_psf


def _parse_coeffs(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError as exc:
        raise SvDeconvError(f"cannot parse coefficient list {text!r}") from exc


def _parse_range(text: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise SvDeconvError(f"expected 'min,max', got {text!r}")
    lo, hi = float(parts[0]), float(parts[1])
    return lo, hi


def _resolve_threads(value) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("DECONV_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise SvDeconvError(f"DECONV_THREADS={env!r} is not an integer") from exc
    return os.cpu_count() or 1


def _make_estimator(spec: str, patch_size: int, n_params: int, coeff_range,
                    grid_points, reference_spec: str, pupil: PupilGrid, psf_size: int):
    if spec.startswith("model:"):
        return load_external_model(spec[len("model:"):], n_params=n_params)
    if spec != "dictionary":
        raise SvDeconvError(f"unknown estimator {spec!r}; use dictionary or model:<path>")
    reference = None
    if reference_spec.startswith("powerlaw:"):
        reference = float(reference_spec[len("powerlaw:"):])
    elif reference_spec.startswith("image:"):
        texture = read_image(reference_spec[len("image:"):])
        if min(texture.shape) < patch_size:
            raise SvDeconvError(
                f"reference texture {texture.shape} smaller than patch {patch_size}"
            )
        texture = texture[:patch_size, :patch_size]
        reference = texture
    else:
        raise SvDeconvError(
            f"unknown reference {reference_spec!r}; use powerlaw:<gamma> or image:<path>"
        )
    dictionary = build_dictionary(
        n_params=n_params,
        coeff_range=coeff_range,
        grid_points=grid_points,
        patch_size=patch_size,
        psf_size=psf_size,
        reference=reference,
        pupil=pupil,
    )
    return DictionaryEstimator(dictionary)


def _cmd_psf(args) -> int:
    pupil = PupilGrid(args.pupil_size, args.aperture)
    kernel = synthesize_psf(_parse_coeffs(args.coeffs), pupil, args.size)
    out = Path(args.out)
    write_psf_preview(out, kernel)
    raw_path = out.with_suffix(".psfraw")
    write_psfraw(raw_path, kernel)
    print(f"psf_png={out} psf_raw={raw_path}")
    return 0


def _cmd_dataset(args) -> int:
    if args.sources == "synthetic":
        sources = [
            datagen.synthetic_cells(args.source_size, seed=args.seed + i)
            for i in range(args.n_sources)
        ]
    else:
        paths = sorted(Path(args.sources).glob("*.png")) + sorted(
            Path(args.sources).glob("*.psfraw")
        )
        if not paths:
            raise SvDeconvError(f"no source images found under {args.sources}")
        sources = [read_image(p) for p in paths]
    cfg = datagen.DatasetConfig(
        n_params=args.n_params,
        coeff_range=_parse_range(args.coeff_range),
        patch_size=args.patch_size,
        psf_size=args.psf_size,
        count=args.count,
        photons_at_max=None if args.photons <= 0 else args.photons,
        rng_seed=args.seed,
    )
    written = datagen.write_dataset(
        datagen.generate_dataset(sources, cfg), args.out, cfg.n_params
    )
    print(f"pairs={written} out={args.out}")
    return 0


def _cmd_map(args) -> int:
    image = read_image(args.input)
    pupil = PupilGrid(args.pupil_size, args.aperture)
    estimator = _make_estimator(
        args.estimator, args.window, args.n_params, _parse_range(args.coeff_range),
        args.grid_points, args.reference, pupil, args.psf_size,
    )
    threads = _resolve_threads(args.threads)
    raw = psfmap.estimate_map(image, estimator, args.window, args.stride, workers=threads)
    smoothed = psfmap.smooth_map(raw, args.smooth_radius)
    psfmap.save_map_json(smoothed, args.out)
    rendered = psfmap.render_map(
        smoothed, Path(args.out).with_suffix(""), _parse_range(args.coeff_range)
    )
    print(f"map={args.out} cells={smoothed.n_cells} renders={','.join(str(p) for p in rendered)}")
    return 0


def _cmd_deconvolve(args) -> int:
    image = read_image(args.input)
    the_map = psfmap.load_map_json(args.map)
    pupil = PupilGrid(args.pupil_size, args.aperture)
    on_iterate = None
    if args.dump_every > 0:
        dump_dir = Path(args.dump_dir or Path(args.out).parent)
        dump_dir.mkdir(parents=True, exist_ok=True)

        def on_iterate(i, x):
            if i % args.dump_every == 0:
                save_image(dump_dir / f"iter_{i:03d}.psfraw", x)

    threads = _resolve_threads(args.threads)
    restored = deconv.tv_rl_deconvolve(
        image,
        the_map,
        iters=args.iters,
        lambda_tv=args.lambda_tv,
        psf_size=args.psf_size,
        pupil=pupil,
        workers=threads,
        on_iterate=on_iterate,
    )
    save_image(args.out, restored)
    print(f"restored={args.out} iters={args.iters}")
    return 0


def _cmd_metrics(args) -> int:
    reference = read_image(args.reference)
    for test_path in args.test:
        m = compute_metrics(reference, read_image(test_path))
        print(f"snr_db={m.snr_db:.9f} ssim={m.ssim:.9f}")
    return 0


def _cmd_benchmark(args) -> int:
    if args.suite != "synthetic-grid":
        raise SvDeconvError(f"unknown benchmark suite {args.suite!r}")
    pupil = PupilGrid(args.pupil_size, args.aperture)
    estimator = None
    if args.estimator != "ground-truth":
        window = args.size // 2
        if args.estimator.startswith("model:"):
            estimator = load_external_model(args.estimator[len("model:"):],
                                            n_params=args.n_params)
        else:
            gt = bench.make_grid_image(args.size, args.cell, args.line_width)
            texture = gt[:window, :window]
            dictionary = build_dictionary(
                n_params=args.n_params,
                coeff_range=_parse_range(args.coeff_range),
                grid_points=args.grid_points,
                patch_size=window,
                psf_size=args.psf_size,
                reference=texture,
                pupil=pupil,
            )
            estimator = DictionaryEstimator(dictionary)
    threads = _resolve_threads(args.threads)
    report = bench.run_grid_benchmark(
        trials=args.trials,
        estimator=estimator,
        seed=args.seed,
        size=args.size,
        cell=args.cell,
        line_width=args.line_width,
        n_params=args.n_params,
        coeff_sample_range=_parse_range(args.coeff_sample_range),
        photons_at_max=None if args.photons <= 0 else args.photons,
        iters=args.iters,
        lambda_tv=args.lambda_tv,
        psf_size=args.psf_size,
        smooth_radius=args.smooth_radius,
        pupil=pupil,
        workers=threads,
    )
    if args.out:
        Path(args.out).write_text(report.to_json())
    if args.panels:
        rng = np.random.default_rng([args.seed, 0])
        lo, hi = _parse_range(args.coeff_sample_range)
        coeffs = rng.uniform(lo, hi, (4, args.n_params))
        gt = bench.make_grid_image(args.size, args.cell, args.line_width)
        degraded, truth_map = bench.quadrant_degrade(
            gt, coeffs, rng, None if args.photons <= 0 else args.photons,
            args.psf_size, pupil,
        )
        restored = deconv.tv_rl_deconvolve(
            degraded, truth_map, iters=args.iters, lambda_tv=args.lambda_tv,
            psf_size=args.psf_size, pupil=pupil,
        )
        Path(args.panels).mkdir(parents=True, exist_ok=True)
        bench.emit_panels(gt, degraded, restored, Path(args.panels) / "panels.png")
    r2_text = "" if report.r2_per_param is None else " r2=" + ",".join(
        f"{v:.4f}" for v in report.r2_per_param
    )
    print(
        f"snr_db {report.snr_degraded:.4f}->{report.snr_restored:.4f} "
        f"ssim {report.ssim_degraded:.4f}->{report.ssim_restored:.4f}{r2_text}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svdeconv",
        description="Semi-blind spatially-variant deconvolution toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def add_common(p):
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: DECONV_THREADS or CPU count)")
        p.add_argument("--pupil-size", type=int, default=255, help="pupil grid size")
        p.add_argument("--aperture", type=float, default=0.5,
                       help="pupil aperture fraction")

    p = sub.add_parser("psf", formatter_class=fmt, help="synthesize a kernel")
    p.add_argument("--coeffs", required=True, help="comma-separated coefficients")
    p.add_argument("--size", type=int, default=127, help="kernel size, odd")
    p.add_argument("--out", required=True, help="output PNG preview path")
    add_common(p)
    p.set_defaults(func=_cmd_psf)

    p = sub.add_parser("dataset", formatter_class=fmt, help="generate training pairs")
    p.add_argument("--sources", default="synthetic",
                   help="directory of grayscale images, or 'synthetic'")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=10000, help="pairs to generate")
    p.add_argument("--n-params", type=int, default=1, help="coefficients per kernel")
    p.add_argument("--coeff-range", default="0,2", help="sampling range min,max")
    p.add_argument("--patch-size", type=int, default=128, help="patch side length")
    p.add_argument("--psf-size", type=int, default=127, help="kernel side length")
    p.add_argument("--photons", type=float, default=1000,
                   help="photons at image max; <=0 disables noise")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--n-sources", type=int, default=8,
                   help="synthetic source count when --sources synthetic")
    p.add_argument("--source-size", type=int, default=256,
                   help="synthetic source side length")
    add_common(p)
    p.set_defaults(func=_cmd_dataset)

    p = sub.add_parser("map", formatter_class=fmt, help="estimate a local PSF map")
    p.add_argument("--input", required=True, help="degraded input image")
    p.add_argument("--out", required=True, help="map JSON path")
    p.add_argument("--estimator", default="dictionary",
                   help="dictionary or model:<path>")
    p.add_argument("--window", type=int, default=128, help="sliding window side")
    p.add_argument("--stride", type=int, default=64, help="window stride in pixels")
    p.add_argument("--smooth-radius", type=int, default=1,
                   help="median filter radius over map cells")
    p.add_argument("--n-params", type=int, default=1, help="coefficients per kernel")
    p.add_argument("--coeff-range", default="0,2", help="coefficient range min,max")
    p.add_argument("--grid-points", type=int, default=None,
                   help="dictionary grid points per axis (41 for one "
                        "parameter, 21 otherwise)")
    p.add_argument("--reference", default="powerlaw:2",
                   help="powerlaw:<gamma> or image:<path>")
    p.add_argument("--psf-size", type=int, default=127, help="kernel side length")
    p.add_argument("--seed", type=int, default=0, help="run seed")
    add_common(p)
    p.set_defaults(func=_cmd_map)

    p = sub.add_parser("deconvolve", formatter_class=fmt, help="restore an image")
    p.add_argument("--input", required=True, help="degraded input image")
    p.add_argument("--map", required=True, help="map JSON path")
    p.add_argument("--iters", type=int, default=20, help="restoration iterations")
    p.add_argument("--lambda-tv", type=float, default=0.001,
                   help="total-variation regularization weight")
    p.add_argument("--out", required=True, help="restored image path")
    p.add_argument("--psf-size", type=int, default=127, help="kernel side length")
    p.add_argument("--dump-every", type=int, default=0,
                   help="dump intermediate iterates every k iterations")
    p.add_argument("--dump-dir", default=None, help="directory for iterate dumps")
    p.add_argument("--seed", type=int, default=0, help="run seed")
    add_common(p)
    p.set_defaults(func=_cmd_deconvolve)

    p = sub.add_parser("metrics", formatter_class=fmt, help="score restored images")
    p.add_argument("--reference", required=True, help="ground-truth image")
    p.add_argument("--test", required=True, nargs="+", help="images to score")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("benchmark", formatter_class=fmt, help="run a benchmark suite")
    p.add_argument("suite", choices=["synthetic-grid"])
    p.add_argument("--trials", type=int, default=100, help="number of trials")
    p.add_argument("--n-params", type=int, default=1, help="coefficients per kernel")
    p.add_argument("--estimator", default="dictionary",
                   help="dictionary, model:<path>, or ground-truth")
    p.add_argument("--seed", type=int, default=7, help="master seed")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--size", type=int, default=252, help="pattern side length")
    p.add_argument("--cell", type=int, default=18, help="grid period in pixels")
    p.add_argument("--line-width", type=int, default=4, help="grid line thickness")
    p.add_argument("--coeff-range", default="0,2", help="dictionary range min,max")
    p.add_argument("--coeff-sample-range", default="0,0.3",
                   help="trial blur sampling range min,max")
    p.add_argument("--grid-points", type=int, default=None,
                   help="dictionary grid points per axis")
    p.add_argument("--photons", type=float, default=1000,
                   help="photons at image max; <=0 disables noise")
    p.add_argument("--iters", type=int, default=20, help="restoration iterations")
    p.add_argument("--lambda-tv", type=float, default=0.001,
                   help="total-variation regularization weight")
    p.add_argument("--psf-size", type=int, default=127, help="kernel side length")
    p.add_argument("--smooth-radius", type=int, default=0,
                   help="median filter radius over map cells")
    p.add_argument("--panels", default=None, help="directory for example panels")
    add_common(p)
    p.set_defaults(func=_cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SvDeconvError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
