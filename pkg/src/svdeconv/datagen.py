"""Training-set generation: degrade source images, crop, filter, augment.

Each pair is produced from its own seeded random stream derived from the
dataset seed and the pair index, so generation order and worker scheduling
cannot change the output. Patches that fail the variance or saturation
filters are resampled until the requested count is reached.

On disk a dataset is a directory of 16-bit PNG patches plus ``manifest.csv``
with header ``index,filename,scale,offset,a_0,...,a_{N-1}``; pixel values are
reconstructed as ``png/65535*scale + offset``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import next_fast_len

from .errors import DomainError, ExhaustionError, GeometryError
from .fileio import read_png_gray, write_png16
from .imageops import add_poisson_noise, as_image, normalize_patch
from .optics import DEFAULT_GRID, PupilGrid, synthesize_psf


@dataclass
class TrainingPair:
    patch: np.ndarray
    coeffs: np.ndarray


@dataclass
class DatasetConfig:
    n_params: int = 1
    coeff_range: tuple = (0.0, 2.0)
    patch_size: int = 128
    psf_size: int = 127
    count: int = 10000
    variance_min: float | None = None  # None: 1e-4 of squared source range
    white_ratio_max: float = 0.5
    rotations: tuple = (0, 90, 180, 270)
    photons_at_max: float | None = 1000.0  # None disables noise
    rng_seed: int = 0
    pupil: PupilGrid = field(default_factory=lambda: DEFAULT_GRID)

    def __post_init__(self):
        if self.count < 1:
            raise DomainError("count must be >= 1")
        if self.n_params < 1:
            raise DomainError("n_params must be >= 1")
        lo, hi = self.coeff_range
        if not lo < hi:
            raise DomainError(f"coeff_range must be increasing, got {self.coeff_range}")
        for angle in self.rotations:
            if angle % 90 != 0:
                raise DomainError(
                    f"rotation augmentation is restricted to 90-degree multiples, got {angle}"
                )

    def resolved_variance_min(self, source) -> float:
        if self.variance_min is not None:
            return self.variance_min
        rng = float(np.max(source) - np.min(source))
        return 1e-4 * rng * rng


def synthetic_cells(size: int, seed: int = 0, n_blobs: int = 60, n_filaments: int = 8,
                    n_puncta: int = 300):
    """Synthetic fluorescence-like texture: soft ellipses, filaments, puncta.

    Values are scaled to [0, 1]. The mixture of coarse blobs and fine puncta
    keeps spectral content across the band used by the patch estimators.
    """
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size))
    rows, cols = np.mgrid[0:size, 0:size].astype(float)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, 2)
        sa, sb = rng.uniform(1.0, 8.0, 2)
        ang = rng.uniform(0, np.pi)
        dy, dx = rows - cy, cols - cx
        u = dy * np.cos(ang) + dx * np.sin(ang)
        v = -dy * np.sin(ang) + dx * np.cos(ang)
        img += rng.uniform(0.3, 1.0) * np.exp(-(u**2 / (2 * sa**2) + v**2 / (2 * sb**2)))
    for _ in range(n_filaments):
        py, px = rng.uniform(10, size - 10, 2)
        ang = rng.uniform(0, 2 * np.pi)
        for _ in range(2 * size):
            ang += rng.normal(0.0, 0.3)
            py += np.sin(ang)
            px += np.cos(ang)
            img[int(py) % size, int(px) % size] += 0.5
    if n_puncta:
        iy = rng.integers(0, size, n_puncta)
        ix = rng.integers(0, size, n_puncta)
        img[iy, ix] += rng.uniform(0.2, 1.0, n_puncta)
    peak = img.max()
    return img / peak if peak > 0 else img


def _sample_coeffs(cfg: DatasetConfig, rng) -> np.ndarray:
    lo, hi = cfg.coeff_range
    return rng.uniform(lo, hi, cfg.n_params)


class _SourcePlan:
    """Cached padded FFT of one source image for repeated degradation."""

    def __init__(self, source, psf_size):
        self.source = as_image(source, "source")
        if min(self.source.shape) < 1:
            raise GeometryError("empty source")
        self.psf_size = psf_size
        hr = hc = psf_size // 2
        padded = np.pad(self.source, ((hr, hr), (hc, hc)), mode="constant")
        full = (padded.shape[0] + psf_size - 1, padded.shape[1] + psf_size - 1)
        self.fshape = (next_fast_len(full[0]), next_fast_len(full[1]))
        self.fsource = np.fft.rfft2(padded, self.fshape)
        self.half = hr

    def convolve(self, kernel):
        fk = np.fft.rfft2(kernel, self.fshape)
        full = np.fft.irfft2(self.fsource * fk, self.fshape)
        h = self.half
        n, m = self.source.shape
        return full[2 * h : 2 * h + n, 2 * h : 2 * h + m]


def degrade(source, coeffs, cfg: DatasetConfig, rng=None):
    """Blur the full source with the synthesized kernel, then add noise.

    Geometry is preserved; noise is skipped when ``cfg.photons_at_max`` is
    None. ``rng`` defaults to a stream seeded by ``cfg.rng_seed``.
    """
    src = as_image(source, "source")
    if min(src.shape) < cfg.patch_size:
        raise GeometryError(
            f"source {src.shape} smaller than patch size {cfg.patch_size}"
        )
    kernel = synthesize_psf(coeffs, cfg.pupil, cfg.psf_size)
    blurred = _SourcePlan(src, cfg.psf_size).convolve(kernel)
    if cfg.photons_at_max is None:
        return blurred
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    return add_poisson_noise(np.clip(blurred, 0.0, None), cfg.photons_at_max, rng)


def accept_patch(patch, cfg: DatasetConfig, variance_min: float | None = None) -> bool:
    """Variance and saturation filter applied to raw (pre-normalization) crops.

    A patch passes when its variance reaches the minimum and at most
    ``white_ratio_max`` of its pixels sit within 2% of the patch maximum.
    """
    p = np.asarray(patch, dtype=float)
    vmin = cfg.resolved_variance_min(p) if variance_min is None else variance_min
    if p.var() < vmin:
        return False
    white = np.count_nonzero(p >= 0.98 * p.max()) / p.size
    return white <= cfg.white_ratio_max


def generate_dataset(sources, cfg: DatasetConfig):
    """Yield exactly ``cfg.count`` accepted, zero-mean training pairs.

    Per pair: pick a source, sample coefficients uniformly, degrade, crop at
    a random offset, rotate by an angle drawn from ``cfg.rotations``, filter,
    normalize. Rejected crops are resampled; generation aborts after
    ``100 * count`` attempts naming the dominant rejection filter.
    """
    src_list = [as_image(s, "source") for s in (sources if isinstance(sources, (list, tuple)) else [sources])]
    if not src_list:
        raise DomainError("no source images given")
    for s in src_list:
        if min(s.shape) < cfg.patch_size:
            raise GeometryError(
                f"source {s.shape} smaller than patch size {cfg.patch_size}"
            )
    plans = [_SourcePlan(s, cfg.psf_size) for s in src_list]
    var_mins = [cfg.resolved_variance_min(s) for s in src_list]

    attempts = 0
    budget = 100 * cfg.count
    rejected_variance = 0
    rejected_white = 0
    produced = 0
    pair_index = 0
    while produced < cfg.count:
        rng = np.random.default_rng([cfg.rng_seed, pair_index])
        pair_index += 1
        emitted = None
        while emitted is None:
            attempts += 1
            if attempts > budget:
                dominant = (
                    "minimum-variance" if rejected_variance >= rejected_white else "white-pixel-ratio"
                )
                raise ExhaustionError(
                    f"could not reach count={cfg.count} after {attempts - 1} attempts; "
                    f"dominant rejection filter: {dominant} "
                    f"(variance: {rejected_variance}, white ratio: {rejected_white})"
                )
            si = int(rng.integers(0, len(plans)))
            plan = plans[si]
            coeffs = _sample_coeffs(cfg, rng)
            kernel = synthesize_psf(coeffs, cfg.pupil, cfg.psf_size)
            degraded = plan.convolve(kernel)
            if cfg.photons_at_max is not None:
                degraded = add_poisson_noise(
                    np.clip(degraded, 0.0, None), cfg.photons_at_max, rng
                )
            n, m = degraded.shape
            r0 = int(rng.integers(0, n - cfg.patch_size + 1))
            c0 = int(rng.integers(0, m - cfg.patch_size + 1))
            crop = degraded[r0 : r0 + cfg.patch_size, c0 : c0 + cfg.patch_size]
            angle = cfg.rotations[int(rng.integers(0, len(cfg.rotations)))]
            crop = np.rot90(crop, (angle // 90) % 4)
            if crop.var() < var_mins[si]:
                rejected_variance += 1
                continue
            white = np.count_nonzero(crop >= 0.98 * crop.max()) / crop.size
            if white > cfg.white_ratio_max:
                rejected_white += 1
                continue
            emitted = TrainingPair(patch=normalize_patch(crop), coeffs=coeffs)
        produced += 1
        yield emitted


MANIFEST_NAME = "manifest.csv"


def write_dataset(pairs, out_dir, n_params: int):
    """Write pairs to ``out_dir/patches/<k>.png`` plus the manifest."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    header = ["index", "filename", "scale", "offset"] + [f"a_{n}" for n in range(n_params)]
    count = 0
    with open(out / MANIFEST_NAME, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, pair in enumerate(pairs):
            fname = f"patches/{k}.png"
            scale, offset = write_png16(out / fname, pair.patch)
            row = [k, fname, repr(scale), repr(offset)] + [repr(float(a)) for a in pair.coeffs]
            writer.writerow(row)
            count += 1
    return count


def load_dataset(dataset_dir):
    """Yield (patch, coeffs) pairs de-quantized per the manifest contract."""
    root = Path(dataset_dir)
    with open(root / MANIFEST_NAME, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_params = len(header) - 4
        if n_params < 1 or header[:4] != ["index", "filename", "scale", "offset"]:
            raise DomainError(f"malformed manifest header: {header}")
        for row in reader:
            _, fname, scale, offset = row[0], row[1], float(row[2]), float(row[3])
            coeffs = np.array([float(v) for v in row[4:]], dtype=float)
            quant = read_png_gray(root / fname)
            patch = quant / 65535.0 * scale + offset
            yield TrainingPair(patch=patch, coeffs=coeffs)
