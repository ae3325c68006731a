"""Per-patch regression of PSF parameters.

Two interchangeable backends implement the same contract: given a zero-mean
patch of fixed size, return a coefficient vector clamped to the training
range, plus a low-confidence flag for degenerate inputs.

``DictionaryEstimator`` is a non-learned baseline. It matches the patch's
radially averaged log power spectrum against a grid of precomputed transfer
function signatures. The blurred patch spectrum factorizes into texture
times transfer function, so with a measured reference texture the expected
patch profile for candidate coefficients ``a`` is

    logaddexp(reference_profile + signature_a, noise_floor)

where the floor, estimated from the excluded top-frequency band, saturates
bins that noise has drowned; matching is L2 over the interior frequency band
(lowest and highest 10% of bins excluded). Without a measured reference the
texture is modeled as a 1/f^gamma power law and matching is offset-free.

``OnnxPatchEstimator`` wraps a trained regression graph loaded from an ONNX
file with input "patch" (float32, 1x1xHxW, zero-mean) and output "coeffs"
(float32, 1xN).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, GeometryError, ModelLoadError
from .imageops import add_poisson_noise, as_image, normalize_patch
from .onnxlite import load_graph
from .optics import DEFAULT_GRID, PupilGrid, synthesize_psf

SPECTRUM_EPS = 1e-12
BAND_EXCLUDE = 0.10  # fraction of bins dropped at each end of the spectrum


@dataclass
class PatchEstimate:
    coeffs: np.ndarray
    low_confidence: bool = False


class PatchEstimator(ABC):
    """Interface shared by all patch regression backends."""

    n_params: int
    patch_size: int
    coeff_range: tuple

    @abstractmethod
    def estimate_patch(self, patch) -> PatchEstimate:
        """Estimate coefficients for one zero-mean patch."""

    def estimate(self, patch) -> np.ndarray:
        return self.estimate_patch(patch).coeffs

    def _check_patch(self, patch) -> np.ndarray:
        p = as_image(patch, "patch")
        if p.shape != (self.patch_size, self.patch_size):
            raise GeometryError(
                f"patch shape {p.shape} does not match estimator size "
                f"{(self.patch_size, self.patch_size)}"
            )
        return p

    def _clamp(self, coeffs) -> np.ndarray:
        lo, hi = self.coeff_range
        return np.clip(np.asarray(coeffs, dtype=float), lo, hi)

    def _midpoint(self) -> np.ndarray:
        lo, hi = self.coeff_range
        return np.full(self.n_params, 0.5 * (lo + hi))


# --------------------------------------------------------------------------
# spectral dictionary baseline

class _RadialBinner:
    """Radial averaging of a 2-D FFT power field into B frequency bins."""

    def __init__(self, size: int, bins: int):
        self.size = size
        self.bins = bins
        fy = np.fft.fftfreq(size)[:, None]
        fx = np.fft.fftfreq(size)[None, :]
        freq = np.hypot(fy, fx)
        idx = np.minimum((freq / 0.5 * bins).astype(int), bins)
        self.inband = idx < bins  # corner frequencies beyond Nyquist dropped
        self.idx = idx[self.inband]
        self.counts = np.maximum(np.bincount(self.idx, minlength=bins), 1)
        self.centers = (np.arange(bins) + 0.5) * (0.5 / bins)

    def log_profile(self, power) -> np.ndarray:
        v = np.log(power + SPECTRUM_EPS)[self.inband]
        return np.bincount(self.idx, weights=v, minlength=self.bins) / self.counts


def radial_log_power(image, bins: int = 64) -> np.ndarray:
    """Radially averaged log power spectrum of an image, B bins to Nyquist."""
    img = as_image(image)
    if img.shape[0] != img.shape[1]:
        raise GeometryError(f"spectral signature needs a square image, got {img.shape}")
    binner = _RadialBinner(img.shape[0], bins)
    return binner.log_profile(np.abs(np.fft.fft2(img)) ** 2)


def _embed_kernel(kernel, size: int) -> np.ndarray:
    """Periodize a centered kernel onto a circular grid, center tap at origin.

    Folding in space samples the kernel's transfer function exactly at the
    grid frequencies, so kernels larger than the grid remain usable.
    """
    k = np.asarray(kernel, dtype=float)
    rows = (np.arange(k.shape[0]) - k.shape[0] // 2) % size
    cols = (np.arange(k.shape[1]) - k.shape[1] // 2) % size
    out = np.zeros((size, size))
    np.add.at(out, (rows[:, None], cols[None, :]), k)
    return out


def _coeff_grid(n_params: int, coeff_range, points_per_axis) -> np.ndarray:
    axes = [np.linspace(coeff_range[0], coeff_range[1], points_per_axis)] * n_params
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class SpectralDictionary:
    """Grid of coefficient vectors with their transfer-function signatures."""

    coeffs: np.ndarray  # (entries, n_params)
    signatures: np.ndarray  # (entries, bins)
    bins: int
    patch_size: int
    coeff_range: tuple
    whitening_exponent: float = 2.0
    reference_texture: np.ndarray | None = None
    reference_profile: np.ndarray | None = None
    psf_size: int = 127
    pupil: PupilGrid = field(default_factory=lambda: DEFAULT_GRID)

    @property
    def n_params(self) -> int:
        return self.coeffs.shape[1]

    @property
    def n_entries(self) -> int:
        return self.coeffs.shape[0]

    def band(self):
        lo = int(np.ceil(BAND_EXCLUDE * self.bins))
        hi = int(np.floor((1.0 - BAND_EXCLUDE) * self.bins))
        return lo, hi


def build_dictionary(
    n_params: int = 1,
    coeff_range=(0.0, 2.0),
    grid_points: int | None = None,
    patch_size: int = 128,
    psf_size: int = 127,
    bins: int = 64,
    reference=None,
    pupil: PupilGrid = DEFAULT_GRID,
) -> SpectralDictionary:
    """Precompute transfer-function signatures on a regular coefficient grid.

    ``reference`` is either a patch-sized texture image (measured reference
    spectrum), a power-law exponent gamma (texture prior 1/f^gamma), or None
    for the default gamma of 2. Defaults to 41 grid points per axis for one
    parameter and 21 for two or more.
    """
    if bins < 16:
        raise DomainError(f"bin count must be >= 16, got {bins}")
    if grid_points is None:
        grid_points = 41 if n_params == 1 else 21
    if grid_points < 2:
        raise DomainError("need at least 2 grid points per axis")
    grid = _coeff_grid(n_params, coeff_range, grid_points)
    binner = _RadialBinner(patch_size, bins)
    signatures = np.empty((grid.shape[0], bins))
    for e, coeffs in enumerate(grid):
        kernel = synthesize_psf(coeffs, pupil, psf_size)
        otf_power = np.abs(np.fft.fft2(_embed_kernel(kernel, patch_size))) ** 2
        signatures[e] = binner.log_profile(otf_power)
    texture = None
    profile = None
    exponent = 2.0
    if reference is None:
        pass
    elif np.isscalar(reference):
        exponent = float(reference)
    else:
        texture = as_image(reference, "reference texture")
        if texture.shape != (patch_size, patch_size):
            raise GeometryError(
                f"reference texture {texture.shape} must match patch size {patch_size}"
            )
        profile = binner.log_profile(np.abs(np.fft.fft2(texture - texture.mean())) ** 2)
    return SpectralDictionary(
        coeffs=grid,
        signatures=signatures,
        bins=bins,
        patch_size=patch_size,
        coeff_range=tuple(coeff_range),
        whitening_exponent=exponent,
        reference_texture=texture,
        reference_profile=profile,
        psf_size=psf_size,
        pupil=pupil,
    )


def estimate_spectral(patch, dictionary: SpectralDictionary) -> PatchEstimate:
    """Nearest-signature match of a patch's whitened radial spectrum.

    With a measured reference profile the candidate spectra are saturated at
    the patch's estimated noise floor before the L2 comparison; in power-law
    mode the 1/f^gamma trend is removed and matching is mean-free over the
    band. Patches without usable spectral content fall back to the range
    midpoint and are flagged low-confidence.
    """
    p = np.asarray(patch, dtype=float)
    lo, hi = dictionary.band()
    variance = p.var()
    scale = max(abs(p).max(), 1.0)
    if variance <= 1e-18 * scale * scale:
        mid = np.full(dictionary.n_params, 0.5 * sum(dictionary.coeff_range))
        return PatchEstimate(coeffs=mid, low_confidence=True)
    binner = _RadialBinner(dictionary.patch_size, dictionary.bins)
    profile = binner.log_profile(np.abs(np.fft.fft2(p)) ** 2)
    if dictionary.reference_profile is not None:
        floor = float(np.median(profile[hi:]))
        models = np.logaddexp(
            dictionary.reference_profile[None, :] + dictionary.signatures, floor
        )
        diff = models[:, lo:hi] - profile[None, lo:hi]
    else:
        prior = -dictionary.whitening_exponent * np.log(binner.centers)
        whitened = profile - prior
        diff = dictionary.signatures[:, lo:hi] - whitened[None, lo:hi]
        diff = diff - diff.mean(axis=1, keepdims=True)  # texture scale is unknown
    dist = np.linalg.norm(diff, axis=1)
    best = int(np.argmin(dist))
    return PatchEstimate(coeffs=dictionary.coeffs[best].copy(), low_confidence=False)


def reference_patch(
    dictionary: SpectralDictionary, coeffs, photons_at_max: float | None = None, rng_seed=0
) -> np.ndarray:
    """Canonical self-test patch: reference texture blurred by ``coeffs``.

    Degradation is periodic convolution on the patch grid so the spectral
    factorization that the dictionary matching relies on is exact. Optional
    Poisson noise, then mean subtraction (the estimator's input contract).
    """
    if dictionary.reference_texture is None:
        raise DomainError("dictionary has no reference texture")
    kernel = synthesize_psf(coeffs, dictionary.pupil, dictionary.psf_size)
    kf = np.fft.rfft2(_embed_kernel(kernel, dictionary.patch_size))
    tf = np.fft.rfft2(dictionary.reference_texture)
    patch = np.fft.irfft2(tf * kf, (dictionary.patch_size, dictionary.patch_size))
    if photons_at_max is not None:
        patch = add_poisson_noise(np.clip(patch, 0.0, None), photons_at_max, rng_seed)
    return normalize_patch(patch)


class DictionaryEstimator(PatchEstimator):
    """PatchEstimator backend over a spectral dictionary."""

    def __init__(self, dictionary: SpectralDictionary):
        self.dictionary = dictionary
        self.n_params = dictionary.n_params
        self.patch_size = dictionary.patch_size
        self.coeff_range = dictionary.coeff_range

    def estimate_patch(self, patch) -> PatchEstimate:
        p = self._check_patch(patch)
        result = estimate_spectral(p, self.dictionary)
        return PatchEstimate(self._clamp(result.coeffs), result.low_confidence)


# --------------------------------------------------------------------------
# external trained model backend

class OnnxPatchEstimator(PatchEstimator):
    """Runs a trained regression graph on normalized patches."""

    def __init__(self, graph, coeff_range=(0.0, 2.0)):
        shape = graph.input_shape
        if len(shape) != 4 or shape[0] != 1 or shape[1] != 1 or shape[2] != shape[3]:
            raise ModelLoadError(
                f"graph input must be shaped 1x1xHxH, got {shape}"
            )
        out_shape = graph.output_shape
        if len(out_shape) != 2 or out_shape[0] != 1 or not out_shape[1] >= 1:
            raise ModelLoadError(f"graph output must be shaped 1xN, got {out_shape}")
        if graph.input_name != "patch" or graph.output_name != "coeffs":
            raise ModelLoadError(
                "graph I/O must be named 'patch' and 'coeffs', got "
                f"{graph.input_name!r} -> {graph.output_name!r}"
            )
        self.graph = graph
        self.patch_size = int(shape[2])
        self.n_params = int(out_shape[1])
        self.coeff_range = tuple(coeff_range)

    def estimate_patch(self, patch) -> PatchEstimate:
        p = self._check_patch(patch)
        scale = max(abs(p).max(), 1.0)
        if p.var() <= 1e-18 * scale * scale:
            return PatchEstimate(coeffs=self._midpoint(), low_confidence=True)
        x = p.astype(np.float32)[None, None, :, :]
        out = self.graph.run(x)
        coeffs = np.asarray(out, dtype=float).reshape(-1)
        return PatchEstimate(coeffs=self._clamp(coeffs), low_confidence=False)


def load_external_model(path, n_params: int | None = None, coeff_range=None) -> OnnxPatchEstimator:
    """Load an ONNX regression graph honoring the patch/coeffs contract.

    The coefficient clamp range is taken from the model's metadata when the
    exporter recorded one, unless overridden. A declared ``n_params`` that
    disagrees with the graph output dimension is a load error.
    """
    graph = load_graph(path)
    meta = graph.graph.metadata
    if coeff_range is None:
        if "coeff_min" in meta and "coeff_max" in meta:
            coeff_range = (float(meta["coeff_min"]), float(meta["coeff_max"]))
        else:
            coeff_range = (0.0, 2.0)
    backend = OnnxPatchEstimator(graph, coeff_range)
    if n_params is not None and backend.n_params != n_params:
        raise ModelLoadError(
            f"model predicts {backend.n_params} coefficients, configuration "
            f"expects {n_params}"
        )
    return backend
