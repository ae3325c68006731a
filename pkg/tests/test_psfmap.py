import json

import numpy as np
import pytest

from svdeconv.errors import GeometryError
from svdeconv.estimator import DictionaryEstimator, PatchEstimate, PatchEstimator
from svdeconv.optics import synthesize_psf
from svdeconv.psfmap import (
    PsfMap,
    estimate_map,
    load_map_json,
    map_grid_shape,
    realize_kernels,
    save_map_json,
    smooth_map,
)


class StubEstimator(PatchEstimator):
    """Deterministic stand-in: responds with the patch standard deviation."""

    def __init__(self, patch_size, n_params=1):
        self.patch_size = patch_size
        self.n_params = n_params
        self.coeff_range = (0.0, 2.0)
        self.calls = 0

    def estimate_patch(self, patch):
        self.calls += 1
        value = min(float(np.std(patch)), 2.0)
        return PatchEstimate(np.full(self.n_params, value))


class TestGridGeometry:
    def test_formula_1024_window128_stride64(self):
        assert map_grid_shape(1024, 1024, 128, 64) == (15, 15)

    def test_formula_quadrants(self):
        assert map_grid_shape(252, 252, 126, 126) == (2, 2)

    def test_formula_matches_floor_everywhere(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            window = int(rng.integers(4, 64))
            stride = int(rng.integers(1, 64))
            height = int(rng.integers(window, 300))
            width = int(rng.integers(window, 300))
            rows, cols = map_grid_shape(height, width, window, stride)
            assert rows == (height - window) // stride + 1
            assert cols == (width - window) // stride + 1

    def test_image_smaller_than_window(self):
        with pytest.raises(GeometryError):
            map_grid_shape(100, 100, 128, 64)


class TestEstimateMap:
    def test_shapes_and_cell_count(self):
        rng = np.random.default_rng(1)
        image = rng.random((96, 128))
        est = StubEstimator(patch_size=32)
        result = estimate_map(image, est, window=32, stride=16, workers=1)
        assert (result.grid_rows, result.grid_cols) == (5, 7)
        assert result.n_cells == 35
        assert est.calls == 35

    def test_worker_pool_matches_serial(self):
        rng = np.random.default_rng(2)
        image = rng.random((80, 80))
        serial = estimate_map(image, StubEstimator(32), 32, 24, workers=1)
        threaded = estimate_map(image, StubEstimator(32), 32, 24, workers=4)
        assert np.array_equal(serial.coeffs, threaded.coeffs)

    def test_window_estimator_mismatch(self):
        with pytest.raises(GeometryError):
            estimate_map(np.zeros((64, 64)), StubEstimator(32), 16, 8)

    def test_uniform_blur_consistency(self, dict_n1_128):
        # periodic tiling of the reference texture, blurred circularly: every
        # window crop then equals the dictionary's canonical reference patch
        truth = 0.8  # on the 41-point grid
        texture = dict_n1_128.reference_texture
        tiled = np.tile(texture, (2, 2))
        kernel = synthesize_psf([truth], dict_n1_128.pupil, dict_n1_128.psf_size)
        kpad = np.zeros_like(tiled)
        kpad[:127, :127] = kernel
        kpad = np.roll(kpad, (-63, -63), axis=(0, 1))
        blurred = np.fft.irfft2(np.fft.rfft2(tiled) * np.fft.rfft2(kpad), tiled.shape)
        result = estimate_map(blurred, DictionaryEstimator(dict_n1_128), 128, 128)
        assert result.coeffs.shape == (2, 2, 1)
        assert np.all(result.coeffs == truth)


class TestSmoothMap:
    def make_map(self, coeffs, low_conf=None):
        coeffs = np.asarray(coeffs, dtype=float)[..., None]
        rows, cols = coeffs.shape[:2]
        return PsfMap(
            window=16,
            stride=16,
            coeffs=coeffs,
            image_width=16 * cols,
            image_height=16 * rows,
            low_confidence=low_conf,
        )

    def test_radius_zero_identity(self):
        m = self.make_map(np.random.default_rng(0).random((4, 5)))
        out = smooth_map(m, 0)
        assert np.array_equal(out.coeffs, m.coeffs)

    def test_outlier_removed(self):
        values = np.full((5, 5), 0.5)
        values[2, 2] = 7.0
        out = smooth_map(self.make_map(np.clip(values, 0, None)), 1)
        assert np.all(out.coeffs == 0.5)

    def test_constant_map_unchanged(self):
        m = self.make_map(np.full((3, 4), 1.25))
        out = smooth_map(m, 2)
        assert np.array_equal(out.coeffs, m.coeffs)

    def test_transpose_equivariance(self):
        values = np.random.default_rng(3).random((4, 6))
        direct = smooth_map(self.make_map(values), 1).coeffs[:, :, 0]
        transposed = smooth_map(self.make_map(values.T), 1).coeffs[:, :, 0]
        assert np.array_equal(direct.T, transposed)

    def test_low_confidence_inherits_neighborhood(self):
        values = np.full((3, 3), 0.4)
        values[1, 1] = 1.0  # midpoint fallback from a degenerate cell
        flags = np.zeros((3, 3), dtype=bool)
        flags[1, 1] = True
        out = smooth_map(self.make_map(values, flags), 1)
        assert np.all(out.coeffs == 0.4)


class TestRealizeKernels:
    def test_uniform_map_identical_kernels(self):
        m = PsfMap(window=32, stride=32, coeffs=np.zeros((2, 2, 1)),
                   image_width=64, image_height=64)
        kernels = realize_kernels(m, psf_size=31)
        assert len(kernels) == 4
        for k in kernels[1:]:
            assert np.array_equal(k, kernels[0])

    def test_row_major_order(self):
        coeffs = np.array([[[0.0], [0.5]], [[1.0], [1.5]]])
        m = PsfMap(window=32, stride=32, coeffs=coeffs, image_width=64, image_height=64)
        kernels = realize_kernels(m, psf_size=31)
        for idx, value in enumerate([0.0, 0.5, 1.0, 1.5]):
            assert np.array_equal(kernels[idx], synthesize_psf([value], out_size=31))

    def test_smooth_radius_zero_keeps_kernels(self):
        rng = np.random.default_rng(4)
        m = PsfMap(window=32, stride=32, coeffs=rng.random((2, 2, 1)),
                   image_width=64, image_height=64)
        a = realize_kernels(m, 31)
        b = realize_kernels(smooth_map(m, 0), 31)
        for ka, kb in zip(a, b):
            assert np.array_equal(ka, kb)


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        m = PsfMap(window=128, stride=64, coeffs=rng.random((3, 4, 2)),
                   image_width=320, image_height=256)
        path = tmp_path / "map.json"
        save_map_json(m, path)
        back = load_map_json(path)
        assert np.allclose(back.coeffs, m.coeffs)
        assert (back.window, back.stride) == (128, 64)
        assert (back.image_width, back.image_height) == (320, 256)

    def test_schema_keys(self, tmp_path):
        m = PsfMap(window=32, stride=32, coeffs=np.zeros((2, 2, 1)),
                   image_width=64, image_height=64)
        path = tmp_path / "map.json"
        save_map_json(m, path)
        doc = json.loads(path.read_text())
        assert set(doc) == {"image_width", "image_height", "window", "stride",
                            "n_params", "cells"}
        assert len(doc["cells"]) == 4
