import numpy as np
import pytest

from svdeconv.errors import GeometryError, UnsupportedAberrationError
from svdeconv.optics import (
    DEFAULT_GRID,
    PupilGrid,
    kernel_moments,
    pupil_function,
    synthesize_psf,
    zernike_eval,
)

SQRT3 = np.sqrt(3.0)
SQRT6 = np.sqrt(6.0)


class TestZernikeEval:
    def test_defocus_at_origin(self):
        assert zernike_eval(0, 0.0, 0.0) == pytest.approx(-SQRT3, abs=1e-12)

    def test_defocus_at_rim(self):
        for theta in [0.0, 1.0, np.pi, 5.0]:
            assert zernike_eval(0, 1.0, theta) == pytest.approx(SQRT3, abs=1e-12)

    def test_astigmatism_at_diagonal(self):
        # sin(2 theta) = 1 at pi/4
        assert zernike_eval(1, 1.0, np.pi / 4) == pytest.approx(SQRT6, abs=1e-12)

    def test_bounded_on_disk(self):
        rho = np.linspace(0, 1, 40)
        theta = np.linspace(0, 2 * np.pi, 41)
        rr, tt = np.meshgrid(rho, theta)
        for idx in range(8):
            vals = zernike_eval(idx, rr, tt)
            assert np.all(np.isfinite(vals))
            assert np.abs(vals).max() < 10.0

    def test_unsupported_index(self):
        with pytest.raises(UnsupportedAberrationError):
            zernike_eval(8, 0.5, 0.0)
        with pytest.raises(UnsupportedAberrationError):
            zernike_eval(-1, 0.5, 0.0)


class TestPupilFunction:
    def test_zero_coeffs_is_disk_indicator(self):
        grid = PupilGrid(65, 0.5)
        field = pupil_function([0.0], grid)
        assert np.all((field == 0) | (field == 1))
        c = 32
        assert field[c, c] == 1.0
        assert field[0, 0] == 0.0

    def test_unit_modulus_inside(self):
        field = pupil_function([0.7, 0.3], PupilGrid(65, 0.5))
        disk = pupil_function([0.0], PupilGrid(65, 0.5)).real.astype(bool)
        assert np.allclose(np.abs(field)[disk], 1.0, atol=1e-12)
        assert np.all(field[~disk] == 0)

    def test_sign_flip_conjugates(self):
        grid = PupilGrid(65, 0.5)
        a = [0.8, -0.4]
        f1 = pupil_function(a, grid)
        f2 = pupil_function([-v for v in a], grid)
        assert np.allclose(f1, np.conj(f2), atol=1e-12)


class TestSynthesizePsf:
    def test_shape_and_invariants(self):
        k = synthesize_psf([0.5], DEFAULT_GRID, 127)
        assert k.shape == (127, 127)
        assert k.min() >= 0.0
        assert abs(k.sum() - 1.0) < 1e-9

    def test_zero_coeffs_symmetry(self):
        k = synthesize_psf([0.0], DEFAULT_GRID, 127)
        assert np.abs(k - np.rot90(k)).max() < 1e-6
        assert np.abs(k - k[::-1, :]).max() < 1e-6
        assert np.abs(k - k[:, ::-1]).max() < 1e-6

    def test_zero_coeffs_centered(self):
        k = synthesize_psf([0.0], DEFAULT_GRID, 127)
        assert np.unravel_index(np.argmax(k), k.shape) == (63, 63)

    def test_normalization_random_coeffs(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            coeffs = rng.uniform(0.0, 2.0, rng.integers(1, 3))
            k = synthesize_psf(coeffs)
            assert abs(k.sum() - 1.0) < 1e-9
            assert k.min() >= 0.0

    def test_defocus_spread_monotone(self):
        spreads = [kernel_moments(synthesize_psf([a]))[0] for a in [0.0, 0.5, 1.0, 1.5, 2.0]]
        assert all(b > a for a, b in zip(spreads, spreads[1:]))

    def test_defocus_increases_spread_vs_diffraction_limited(self):
        sharp = kernel_moments(synthesize_psf([0.0]))[0]
        blurred = kernel_moments(synthesize_psf([2.0]))[0]
        assert blurred > sharp

    def test_astigmatism_with_defocus_is_anisotropic(self):
        # oblique astigmatism elongates along the diagonals: the principal
        # second moments split even though row/column variances stay equal
        _, vr, vc, cov = kernel_moments(synthesize_psf([1.0, 1.5]))
        eigvals = np.linalg.eigvalsh([[vr, cov], [cov, vc]])
        assert (eigvals[1] - eigvals[0]) / eigvals[1] > 0.05

    def test_vertical_astigmatism_splits_row_col_variance(self):
        # the cos(2 theta) variant aligns the split with the image axes
        _, vr, vc, _ = kernel_moments(synthesize_psf([1.0, 0.0, 1.5]))
        assert abs(vr - vc) / max(vr, vc) > 0.05

    def test_pure_astigmatism_is_angularly_anisotropic(self):
        # at zero defocus the row/column variances coincide by symmetry, but
        # energy concentrates along the diagonals relative to the axes
        k = synthesize_psf([0.0, 1.5])
        n = k.shape[0]
        c = n // 2
        rows, cols = np.mgrid[0:n, 0:n]
        dy, dx = rows - c, cols - c
        radius = np.hypot(dy, dx)
        angle = np.mod(np.arctan2(dy, dx), np.pi / 2)
        ring = radius > 3
        axial = k[ring & (np.minimum(angle, np.pi / 2 - angle) < 0.2)].sum()
        diagonal = k[ring & (np.abs(angle - np.pi / 4) < 0.2)].sum()
        assert abs(axial - diagonal) / max(axial, diagonal) > 0.05

    def test_determinism(self):
        a = synthesize_psf([0.3, 0.8])
        b = synthesize_psf([0.3, 0.8])
        assert np.array_equal(a, b)

    def test_geometry_errors(self):
        with pytest.raises(GeometryError):
            synthesize_psf([0.0], DEFAULT_GRID, 128)
        with pytest.raises(GeometryError):
            synthesize_psf([0.0], PupilGrid(65, 0.5), 127)
        with pytest.raises(GeometryError):
            PupilGrid(64, 0.5)
