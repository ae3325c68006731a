"""Zernike aberration model, pupil construction and PSF synthesis.

The blur kernel of the imaging system is parameterized by a small vector of
Zernike coefficients, expressed in waves of phase aberration at the pupil
edge. A coefficient vector ``a`` defines the generalized pupil

    P(s) * exp(i * 2*pi * sum_n a_n * Z_n(s))

on the unit disk, and the incoherent point spread function is the squared
modulus of its Fourier transform, center-cropped and normalized to unit sum.

The aberration table is indexed from 0 and starts at defocus; the order and
orientation of the entries is exposed through ``ABERRATION_NAMES`` so callers
can remap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, DomainError, UnsupportedAberrationError

_SQRT3 = np.sqrt(3.0)
_SQRT6 = np.sqrt(6.0)
_SQRT8 = np.sqrt(8.0)
_SQRT5 = np.sqrt(5.0)

# Radial/angular forms in Noll normalization, ordered so that index 0 is
# defocus and index 1 is the oblique (sin 2*theta) astigmatism.
_ABERRATIONS = (
    ("defocus", lambda r, t: _SQRT3 * (2.0 * r**2 - 1.0)),
    ("astigmatism_oblique", lambda r, t: _SQRT6 * r**2 * np.sin(2.0 * t)),
    ("astigmatism_vertical", lambda r, t: _SQRT6 * r**2 * np.cos(2.0 * t)),
    ("coma_vertical", lambda r, t: _SQRT8 * (3.0 * r**3 - 2.0 * r) * np.sin(t)),
    ("coma_horizontal", lambda r, t: _SQRT8 * (3.0 * r**3 - 2.0 * r) * np.cos(t)),
    ("trefoil_vertical", lambda r, t: _SQRT8 * r**3 * np.sin(3.0 * t)),
    ("trefoil_oblique", lambda r, t: _SQRT8 * r**3 * np.cos(3.0 * t)),
    ("spherical", lambda r, t: _SQRT5 * (6.0 * r**4 - 6.0 * r**2 + 1.0)),
)

ABERRATION_NAMES = tuple(name for name, _ in _ABERRATIONS)


def zernike_eval(index, rho, theta):
    """Evaluate the aberration polynomial ``index`` at polar pupil coordinates.

    ``rho`` is the normalized radius in [0, 1] and ``theta`` the azimuth in
    radians; both may be arrays. Index 0 is defocus, index 1 oblique
    astigmatism, and higher indices follow ``ABERRATION_NAMES``.
    """
    if not 0 <= index < len(_ABERRATIONS):
        raise UnsupportedAberrationError(
            f"aberration index {index} outside supported table "
            f"(0..{len(_ABERRATIONS) - 1})"
        )
    return _ABERRATIONS[index][1](np.asarray(rho, dtype=float), np.asarray(theta, dtype=float))


@dataclass(frozen=True)
class PupilGrid:
    """Discretization of the pupil plane.

    ``size`` is the odd pixel count per side of the FFT grid and
    ``aperture_fraction`` the fraction of the grid half-width covered by the
    unit pupil disk. The default half-filled pupil keeps the diffraction
    spot oversampled so the transfer function does not alias at the grid edge.
    """

    size: int = 255
    aperture_fraction: float = 0.5

    def __post_init__(self):
        if self.size < 3 or self.size % 2 == 0:
            raise GeometryError(f"pupil grid size must be odd and >= 3, got {self.size}")
        if not 0.0 < self.aperture_fraction <= 1.0:
            raise DomainError(
                f"aperture_fraction must be in (0, 1], got {self.aperture_fraction}"
            )


DEFAULT_GRID = PupilGrid()


def validate_coeffs(coeffs):
    """Return the coefficient vector as a 1-D float array, checking finiteness."""
    a = np.atleast_1d(np.asarray(coeffs, dtype=float))
    if a.ndim != 1 or a.size < 1:
        raise DomainError("coefficient vector must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(a)):
        raise DomainError("coefficient vector contains non-finite values")
    if a.size > len(_ABERRATIONS):
        raise UnsupportedAberrationError(
            f"{a.size} coefficients requested, table has {len(_ABERRATIONS)}"
        )
    return a


def pupil_function(coeffs, grid: PupilGrid = DEFAULT_GRID):
    """Sample the generalized pupil on the grid.

    Returns a complex field that is zero outside the aperture disk and has
    unit modulus inside, with phase 2*pi times the summed aberrations.
    """
    a = validate_coeffs(coeffs)
    c = (grid.size - 1) / 2.0
    radius = grid.aperture_fraction * c
    yy, xx = np.mgrid[0 : grid.size, 0 : grid.size].astype(float)
    yy -= c
    xx -= c
    rho = np.hypot(yy, xx) / radius
    disk = rho <= 1.0
    theta = np.arctan2(yy, xx)
    phase = np.zeros((grid.size, grid.size))
    for n, an in enumerate(a):
        if an != 0.0:
            phase += an * zernike_eval(n, rho, theta)
    field = np.zeros((grid.size, grid.size), dtype=complex)
    field[disk] = np.exp(2j * np.pi * phase[disk])
    return field


def synthesize_psf(coeffs, grid: PupilGrid = DEFAULT_GRID, out_size: int = 127):
    """Synthesize the discrete PSF for a coefficient vector.

    The squared modulus of the pupil FFT is shifted so the zero-aberration
    intensity peak lands on the center pixel, center-cropped to
    ``out_size`` (odd, at most ``grid.size``) and renormalized to unit sum.
    The result is deterministic in all inputs.
    """
    if out_size % 2 == 0 or out_size < 1:
        raise GeometryError(f"PSF size must be odd and positive, got {out_size}")
    if out_size > grid.size:
        raise GeometryError(
            f"PSF size {out_size} exceeds pupil grid size {grid.size}"
        )
    field = pupil_function(coeffs, grid)
    intensity = np.abs(np.fft.fft2(field)) ** 2
    intensity = np.fft.fftshift(intensity)
    c = grid.size // 2
    o = out_size // 2
    kernel = intensity[c - o : c + o + 1, c - o : c + o + 1]
    total = kernel.sum()
    if total <= 0.0:
        raise DomainError("synthesized PSF has no energy inside the crop")
    return kernel / total


def check_psf(kernel, tol: float = 1e-9):
    """Validate PSF invariants: odd square support, non-negative, unit sum."""
    k = np.asarray(kernel, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise GeometryError(f"PSF must be odd square, got shape {k.shape}")
    if k.min() < 0.0:
        raise DomainError("PSF has negative pixels")
    if abs(k.sum() - 1.0) > tol:
        raise DomainError(f"PSF sum deviates from 1 by {abs(k.sum() - 1.0):.3e}")
    return k


def kernel_moments(kernel):
    """Centroid-referenced second moments of a kernel.

    Returns ``(spread, var_rows, var_cols, cov)`` where spread is the trace
    of the second-moment matrix. Used to quantify blur extent and anisotropy.
    """
    k = np.asarray(kernel, dtype=float)
    n, m = k.shape
    rows, cols = np.mgrid[0:n, 0:m].astype(float)
    mass = k.sum()
    mr = (k * rows).sum() / mass
    mc = (k * cols).sum() / mass
    vr = (k * (rows - mr) ** 2).sum() / mass
    vc = (k * (cols - mc) ** 2).sum() / mass
    cv = (k * (rows - mr) * (cols - mc)).sum() / mass
    return vr + vc, vr, vc, cv
