"""Acceptance suite: one test per release criterion, at the stated tolerances.

Each test prints a single PASS/FAIL line (visible with ``pytest -s`` or in
the captured output section) so the suite doubles as a checklist.
"""

import time

import numpy as np
import pytest

from svdeconv.bench import make_grid_image, r_squared, run_grid_benchmark
from svdeconv.deconv import build_masks, sv_convolve, tv_rl_deconvolve
from svdeconv.estimator import DictionaryEstimator, build_dictionary, reference_patch
from svdeconv.imageops import fft_convolve
from svdeconv.optics import kernel_moments, synthesize_psf
from svdeconv.psfmap import PsfMap, estimate_map, map_grid_shape


def report(name: str, ok: bool, detail: str):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_partition_of_unity():
    rng = np.random.default_rng(100)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        window = int(rng.integers(8, 150))
        stride = int(rng.integers(1, window + 1))
        height = int(rng.integers(window, 400))
        width = int(rng.integers(window, 400))
        rows, cols = map_grid_shape(height, width, window, stride)
        m = PsfMap(window=window, stride=stride, coeffs=np.zeros((rows, cols, 1)),
                   image_width=width, image_height=height)
        masks = build_masks(m)
        total = sum(masks.mask(i) for i in range(masks.n_masks))
        worst = max(worst, float(np.abs(total - 1.0).max()))
    elapsed = time.perf_counter() - t0
    report(
        "partition-of-unity",
        worst < 1e-6 and elapsed < 10.0,
        f"max deviation {worst:.2e} over 20 geometries in {elapsed:.1f}s",
    )


def test_convolution_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(16, 65))
        m = int(rng.integers(16, 65))
        ks = int(rng.choice([3, 5, 7, 9, 11, 13, 15]))
        img = rng.random((n, m))
        kernel = rng.random((ks, ks))
        padding = "zero" if rng.random() < 0.5 else "reflect"
        got = fft_convolve(img, kernel, padding)
        half = ks // 2
        mode = {"zero": "constant", "reflect": "reflect"}[padding]
        padded = np.pad(img, half, mode=mode)
        flipped = kernel[::-1, ::-1]
        want = np.empty_like(img)
        for i in range(n):
            for j in range(m):
                want[i, j] = np.sum(padded[i : i + ks, j : j + ks] * flipped)
        worst = max(worst, float(np.linalg.norm(got - want) / np.linalg.norm(want)))
    elapsed = time.perf_counter() - t0
    report(
        "convolution-oracle",
        worst < 1e-8 and elapsed < 30.0,
        f"max relative L2 {worst:.2e} over 50 instances in {elapsed:.1f}s",
    )


def test_spatially_variant_reduction():
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(10):
        size = int(rng.integers(64, 160))
        window = size // int(rng.integers(2, 4))
        stride = window
        rows, cols = map_grid_shape(size, size, window, stride)
        m = PsfMap(window=window, stride=stride, coeffs=np.zeros((rows, cols, 1)),
                   image_width=size, image_height=size)
        ksize = int(rng.choice([15, 31]))
        kernel = synthesize_psf([float(rng.uniform(0, 1))], out_size=ksize)
        img = rng.random((size, size))
        got = sv_convolve(img, [kernel] * m.n_cells, build_masks(m))
        want = fft_convolve(img, kernel, padding="zero")
        worst = max(worst, float(np.linalg.norm(got - want) / np.linalg.norm(want)))
    report(
        "sv-reduction",
        worst < 1e-6,
        f"max relative L2 {worst:.2e} over 10 cases",
    )


def test_rl_fixed_point():
    rng = np.random.default_rng(103)
    y = np.abs(rng.normal(1.0, 0.3, (252, 252)))
    delta = np.zeros((127, 127))
    delta[63, 63] = 1.0
    m = PsfMap(window=126, stride=126, coeffs=np.zeros((2, 2, 1)),
               image_width=252, image_height=252)
    x = tv_rl_deconvolve(y, m, iters=20, lambda_tv=0.0, kernels=[delta] * 4)
    drift = float(np.abs(x - y).max())
    report("rl-fixed-point", drift < 1e-6, f"max drift {drift:.2e} after 20 iterations")


def test_restoration_improvement_table1_analogue():
    t0 = time.perf_counter()
    gt_report = run_grid_benchmark(trials=20, estimator=None, seed=7, workers=1)
    d_snr = gt_report.snr_restored - gt_report.snr_degraded
    d_ssim = gt_report.ssim_restored - gt_report.ssim_degraded

    grid = make_grid_image()
    dictionary = build_dictionary(
        n_params=1, coeff_range=(0.0, 2.0), patch_size=126, reference=grid[:126, :126]
    )
    dict_report = run_grid_benchmark(
        trials=20, estimator=DictionaryEstimator(dictionary), seed=7, workers=1
    )
    d_snr_est = dict_report.snr_restored - dict_report.snr_degraded
    elapsed = time.perf_counter() - t0
    report(
        "table1-analogue",
        d_snr >= 2.0 and d_ssim >= 0.15 and d_snr_est >= 1.0 and elapsed < 300.0,
        f"ground-truth map dSNR {d_snr:+.2f} dB dSSIM {d_ssim:+.3f}; "
        f"dictionary dSNR {d_snr_est:+.2f} dB; {elapsed:.0f}s",
    )


def test_parameter_recovery(dict_n1_128, est_n1_128):
    rng = np.random.default_rng(104)
    grid_values = dict_n1_128.coeffs[:, 0]

    truth, noiseless_est = [], []
    for _ in range(200):
        a = grid_values[int(rng.integers(0, grid_values.size))]
        truth.append([a])
        patch = reference_patch(dict_n1_128, [a])
        noiseless_est.append(est_n1_128.estimate(patch).tolist())
    r2_clean = r_squared(truth, noiseless_est, 0)

    step = grid_values[1] - grid_values[0]
    truth_noisy, noisy_est = [], []
    within_one_step = 0
    for _ in range(200):
        a = grid_values[int(rng.integers(0, grid_values.size))]
        truth_noisy.append([a])
        patch = reference_patch(dict_n1_128, [a], photons_at_max=1000.0, rng_seed=rng)
        est = est_n1_128.estimate(patch)
        noisy_est.append(est.tolist())
        within_one_step += abs(est[0] - a) <= step + 1e-12
    r2_noisy = r_squared(truth_noisy, noisy_est, 0)

    dict_n2 = build_dictionary(
        n_params=2, coeff_range=(0.0, 2.0), patch_size=128,
        reference=dict_n1_128.reference_texture,
    )
    est_n2 = DictionaryEstimator(dict_n2)
    axis = np.linspace(0.0, 2.0, 21)
    truth2, est2 = [], []
    for _ in range(200):
        pair = [axis[int(rng.integers(0, 21))], axis[int(rng.integers(0, 21))]]
        truth2.append(pair)
        patch = reference_patch(dict_n2, pair, photons_at_max=1000.0, rng_seed=rng)
        est2.append(est_n2.estimate(patch).tolist())
    r2_focus = r_squared(truth2, est2, 0)
    r2_astig = r_squared(truth2, est2, 1)

    report(
        "parameter-recovery",
        r2_clean == 1.0 and r2_noisy >= 0.8 and within_one_step >= 180
        and r2_astig < r2_focus,
        f"noiseless R2 {r2_clean}; photons=1000 R2 {r2_noisy:.3f} "
        f"({within_one_step}/200 within one grid step); "
        f"N=2 focus {r2_focus:.3f} vs astigmatism {r2_astig:.3f}",
    )


def test_psf_properties():
    rng = np.random.default_rng(105)
    worst_sum = 0.0
    min_pixel = np.inf
    for _ in range(100):
        n = int(rng.integers(1, 3))
        coeffs = rng.uniform(0.0, 2.0, n)
        k = synthesize_psf(coeffs)
        worst_sum = max(worst_sum, abs(float(k.sum()) - 1.0))
        min_pixel = min(min_pixel, float(k.min()))
    spreads = [kernel_moments(synthesize_psf([a]))[0] for a in (0.0, 0.5, 1.0, 1.5, 2.0)]
    monotone = all(b >= a for a, b in zip(spreads, spreads[1:]))
    report(
        "psf-properties",
        worst_sum < 1e-9 and min_pixel >= 0.0 and monotone,
        f"max |sum-1| {worst_sum:.2e}, min pixel {min_pixel:.2e}, "
        f"defocus spread {['%.0f' % s for s in spreads]}",
    )


def test_map_geometry(est_n1_128):
    rows, cols = map_grid_shape(1024, 1024, 128, 64)
    formula_ok = (rows, cols) == (15, 15)
    rng = np.random.default_rng(106)
    image = np.abs(rng.normal(1.0, 0.2, (1024, 1024)))
    m = estimate_map(image, est_n1_128, window=128, stride=64)
    report(
        "map-geometry",
        formula_ok and (m.grid_rows, m.grid_cols) == (15, 15) and m.n_cells == 225,
        f"window 128 stride 64 on 1024x1024 -> {m.grid_rows}x{m.grid_cols} cells",
    )


def test_performance(est_n1_128, grid_gt):
    rng = np.random.default_rng(107)
    image = np.abs(rng.normal(1.0, 0.2, (1024, 1024)))
    t0 = time.perf_counter()
    m = estimate_map(image, est_n1_128, window=128, stride=128, workers=1)
    map_elapsed = time.perf_counter() - t0
    assert m.n_cells == 64

    coeffs = np.random.default_rng(7).uniform(0.0, 0.3, (2, 2, 1))
    quad = PsfMap(window=126, stride=126, coeffs=coeffs,
                  image_width=252, image_height=252)
    degraded = np.clip(
        sv_convolve(grid_gt, [synthesize_psf(c) for c in coeffs.reshape(4, 1)],
                    build_masks(quad)),
        0.0,
        None,
    )
    t0 = time.perf_counter()
    tv_rl_deconvolve(degraded, quad, iters=20, lambda_tv=0.001, workers=1)
    deconv_elapsed = time.perf_counter() - t0
    report(
        "performance",
        map_elapsed < 5.0 and deconv_elapsed < 30.0,
        f"64-cell map {map_elapsed:.2f}s; 252x252 quadrant restoration "
        f"{deconv_elapsed:.2f}s",
    )
