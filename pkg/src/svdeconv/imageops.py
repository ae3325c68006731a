"""Core raster arithmetic: FFT convolution, noise, normalization and metrics.

Images are plain 2-D float64 arrays. Convolution is linear (not circular):
the field is extended past the kernel support before the transform so no
wrap-around occurs, and the result is restricted back to the input geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import next_fast_len

from .errors import DomainError, GeometryError

SNR_CAP_DB = 300.0

_PAD_MODES = {"zero": "constant", "reflect": "reflect"}


def as_image(data, name: str = "image"):
    """Coerce to a finite 2-D float64 array."""
    img = np.asarray(data, dtype=float)
    if img.ndim != 2 or img.size == 0:
        raise GeometryError(f"{name} must be a non-empty 2-D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DomainError(f"{name} contains non-finite values")
    return img


def _conv_full(a, b, shape):
    """Linear convolution of ``a`` and ``b`` zero-embedded in ``shape``."""
    fshape = (next_fast_len(shape[0]), next_fast_len(shape[1]))
    fa = np.fft.rfft2(a, fshape)
    fb = np.fft.rfft2(b, fshape)
    return np.fft.irfft2(fa * fb, fshape)[: shape[0], : shape[1]]


def fft_convolve(image, kernel, padding: str = "zero"):
    """Convolve an image with a centered odd kernel, same-size output.

    ``padding`` selects how the field is extended beyond the image border:
    ``zero`` or ``reflect``. Internally the padded field is transformed at
    full linear-convolution size so the circular FFT product is aliasing-free.
    """
    img = as_image(image)
    k = np.asarray(kernel, dtype=float)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise GeometryError(f"kernel must be 2-D with odd sides, got {k.shape}")
    if padding not in _PAD_MODES:
        raise DomainError(f"unknown padding mode {padding!r}")
    n, m = img.shape
    hr, hc = k.shape[0] // 2, k.shape[1] // 2
    if padding == "reflect" and (hr >= n or hc >= m):
        raise GeometryError(
            f"kernel {k.shape} too large for reflect extension of image {img.shape}"
        )
    padded = np.pad(img, ((hr, hr), (hc, hc)), mode=_PAD_MODES[padding])
    full_shape = (padded.shape[0] + k.shape[0] - 1, padded.shape[1] + k.shape[1] - 1)
    full = _conv_full(padded, k, full_shape)
    return full[2 * hr : 2 * hr + n, 2 * hc : 2 * hc + m]


def add_poisson_noise(image, photons_at_max, rng_seed):
    """Replace each pixel by a scaled Poisson draw.

    The image is mapped to photon counts with ``photons_at_max`` at the image
    maximum, sampled, and mapped back. Deterministic for a fixed seed; a zero
    image passes through unchanged.
    """
    img = as_image(image)
    if img.min() < 0.0:
        raise DomainError("Poisson noise requires a non-negative image")
    if not photons_at_max > 0.0:
        raise DomainError(f"photons_at_max must be positive, got {photons_at_max}")
    peak = img.max()
    if peak == 0.0:
        return img.copy()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    counts = rng.poisson(img / peak * photons_at_max)
    return counts / photons_at_max * peak


def normalize_patch(patch):
    """Subtract the pixel-wise mean; shape is preserved."""
    p = as_image(patch, "patch")
    return p - p.mean()


def snr(reference, test):
    """Signal-to-noise ratio in dB after an optimal affine fit of the test.

    Gain and offset minimizing ``||ref - (g*test + b)||^2`` are solved in
    closed form, so the metric is invariant to linear rescaling of the test
    image. Signal power is taken relative to the mean-removed reference.
    A zero (or numerically negligible) residual reports the 300 dB cap.
    """
    ref = as_image(reference, "reference")
    tst = as_image(test, "test")
    if ref.shape != tst.shape:
        raise GeometryError(f"shape mismatch {ref.shape} vs {tst.shape}")
    r = ref.ravel() - ref.mean()
    t = tst.ravel() - tst.mean()
    tt = float(np.dot(t, t))
    gain = float(np.dot(t, r)) / tt if tt > 0.0 else 0.0
    resid = r - gain * t
    signal_power = float(np.dot(r, r))
    resid_power = float(np.dot(resid, resid))
    if signal_power == 0.0:
        # constant reference: any test fits exactly via b
        return SNR_CAP_DB
    if resid_power <= signal_power * 1e-24:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * np.log10(signal_power / resid_power))


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gaussian_window():
    ax = np.arange(_SSIM_WINDOW, dtype=float) - (_SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * _SSIM_SIGMA**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(reference, test):
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Local statistics are computed on fully interior windows only and the
    dynamic range is taken from the reference. Two identical images score
    exactly 1.0; two equal constant images are defined as 1.0.
    """
    ref = as_image(reference, "reference")
    tst = as_image(test, "test")
    if ref.shape != tst.shape:
        raise GeometryError(f"shape mismatch {ref.shape} vs {tst.shape}")
    if min(ref.shape) < _SSIM_WINDOW:
        raise GeometryError(
            f"images must be at least {_SSIM_WINDOW} pixels per side, got {ref.shape}"
        )
    dynamic_range = ref.max() - ref.min()
    if dynamic_range == 0.0:
        if np.array_equal(ref, tst):
            return 1.0
        raise DomainError("reference has zero dynamic range but images differ")
    win = _gaussian_window()
    wr = sliding_window_view(ref, (_SSIM_WINDOW, _SSIM_WINDOW))
    wt = sliding_window_view(tst, (_SSIM_WINDOW, _SSIM_WINDOW))
    mu_r = np.einsum("ijkl,kl->ij", wr, win)
    mu_t = np.einsum("ijkl,kl->ij", wt, win)
    var_r = np.einsum("ijkl,kl->ij", wr * wr, win) - mu_r**2
    var_t = np.einsum("ijkl,kl->ij", wt * wt, win) - mu_t**2
    cov = np.einsum("ijkl,kl->ij", wr * wt, win) - mu_r * mu_t
    c1 = (_SSIM_K1 * dynamic_range) ** 2
    c2 = (_SSIM_K2 * dynamic_range) ** 2
    num = (2.0 * mu_r * mu_t + c1) * (2.0 * cov + c2)
    den = (mu_r**2 + mu_t**2 + c1) * (var_r + var_t + c2)
    return float(np.mean(num / den))


@dataclass
class Metrics:
    snr_db: float
    ssim: float


def compute_metrics(reference, test) -> Metrics:
    return Metrics(snr_db=float(snr(reference, test)), ssim=float(ssim(reference, test)))
