"""Sliding-window PSF parameter maps over large images.

A map holds one coefficient vector per window position on the regular grid

    grid_rows = floor((height - window) / stride) + 1   (same for columns)

anchored at the window's top-left pixel. Estimation fans patches out to a
thread pool; results are written by grid position so worker scheduling never
changes the output.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, GeometryError
from .estimator import PatchEstimator
from .fileio import write_false_color
from .imageops import as_image, normalize_patch
from .optics import DEFAULT_GRID, PupilGrid, synthesize_psf


def map_grid_shape(height: int, width: int, window: int, stride: int):
    if window < 1 or stride < 1:
        raise GeometryError(f"window and stride must be >= 1, got {window}, {stride}")
    if height < window or width < window:
        raise GeometryError(
            f"image {height}x{width} smaller than window {window}"
        )
    return (height - window) // stride + 1, (width - window) // stride + 1


@dataclass
class PsfMap:
    window: int
    stride: int
    coeffs: np.ndarray  # (grid_rows, grid_cols, n_params)
    image_width: int
    image_height: int
    low_confidence: np.ndarray = field(default=None)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 3:
            raise GeometryError(f"coeffs must be 3-D, got shape {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise DomainError("map contains non-finite coefficients")
        expected = map_grid_shape(self.image_height, self.image_width, self.window, self.stride)
        if self.coeffs.shape[:2] != expected:
            raise GeometryError(
                f"coefficient grid {self.coeffs.shape[:2]} inconsistent with "
                f"geometry {expected}"
            )
        if self.low_confidence is None:
            self.low_confidence = np.zeros(self.coeffs.shape[:2], dtype=bool)
        else:
            self.low_confidence = np.asarray(self.low_confidence, dtype=bool)

    @property
    def grid_rows(self) -> int:
        return self.coeffs.shape[0]

    @property
    def grid_cols(self) -> int:
        return self.coeffs.shape[1]

    @property
    def n_cells(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def n_params(self) -> int:
        return self.coeffs.shape[2]

    def cell_centers(self):
        """Patch-center coordinates of every cell, (rows, cols) 1-D arrays."""
        half = (self.window - 1) / 2.0
        rows = np.arange(self.grid_rows) * self.stride + half
        cols = np.arange(self.grid_cols) * self.stride + half
        return rows, cols


def estimate_map(
    image, estimator: PatchEstimator, window: int, stride: int, workers: int = 1
) -> PsfMap:
    """Estimate a coefficient map with an overlapping sliding window.

    Cell (i, j) is the estimate of the normalized crop anchored at
    ``(i*stride, j*stride)``. Estimator backends must be reentrant when
    ``workers`` exceeds one.
    """
    img = as_image(image)
    if window != estimator.patch_size:
        raise GeometryError(
            f"window {window} does not match estimator patch size {estimator.patch_size}"
        )
    rows, cols = map_grid_shape(img.shape[0], img.shape[1], window, stride)
    coeffs = np.empty((rows, cols, estimator.n_params))
    low_conf = np.zeros((rows, cols), dtype=bool)

    def run_cell(cell):
        i, j = cell
        crop = img[i * stride : i * stride + window, j * stride : j * stride + window]
        result = estimator.estimate_patch(normalize_patch(crop))
        return i, j, result

    cells = [(i, j) for i in range(rows) for j in range(cols)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = pool.map(run_cell, cells)
    else:
        results = map(run_cell, cells)
    for i, j, result in results:
        coeffs[i, j] = result.coeffs
        low_conf[i, j] = result.low_confidence
    return PsfMap(
        window=window,
        stride=stride,
        coeffs=coeffs,
        image_width=img.shape[1],
        image_height=img.shape[0],
        low_confidence=low_conf,
    )


def _median_filter_2d(values: np.ndarray, radius: int) -> np.ndarray:
    padded = np.pad(values, radius, mode="edge")
    out = np.empty_like(values)
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            out[i, j] = np.median(padded[i : i + 2 * radius + 1, j : j + 2 * radius + 1])
    return out


def smooth_map(psf_map: PsfMap, radius: int = 1) -> PsfMap:
    """Per-parameter 2-D median filter with edge replication.

    Radius 0 is the identity. For positive radii, cells flagged low-confidence
    first inherit the median of their 3x3 neighborhood so isolated fallback
    values cannot leak into the filtered map.
    """
    if radius < 0:
        raise DomainError(f"radius must be >= 0, got {radius}")
    coeffs = psf_map.coeffs.copy()
    if radius == 0:
        return PsfMap(
            window=psf_map.window,
            stride=psf_map.stride,
            coeffs=coeffs,
            image_width=psf_map.image_width,
            image_height=psf_map.image_height,
            low_confidence=psf_map.low_confidence.copy(),
        )
    if psf_map.low_confidence.any():
        for n in range(psf_map.n_params):
            neighborhood = _median_filter_2d(coeffs[:, :, n], 1)
            coeffs[:, :, n][psf_map.low_confidence] = neighborhood[psf_map.low_confidence]
    smoothed = np.empty_like(coeffs)
    for n in range(psf_map.n_params):
        smoothed[:, :, n] = _median_filter_2d(coeffs[:, :, n], radius)
    return PsfMap(
        window=psf_map.window,
        stride=psf_map.stride,
        coeffs=smoothed,
        image_width=psf_map.image_width,
        image_height=psf_map.image_height,
        low_confidence=np.zeros_like(psf_map.low_confidence),
    )


def realize_kernels(psf_map: PsfMap, psf_size: int = 127, pupil: PupilGrid = DEFAULT_GRID):
    """Synthesize the kernel of every cell in row-major order.

    Cells sharing a coefficient vector reuse the same synthesis result, so
    smoothed maps with constant regions stay cheap.
    """
    cache = {}
    kernels = []
    for i in range(psf_map.grid_rows):
        for j in range(psf_map.grid_cols):
            key = tuple(psf_map.coeffs[i, j])
            if key not in cache:
                cache[key] = synthesize_psf(psf_map.coeffs[i, j], pupil, psf_size)
            kernels.append(cache[key])
    return kernels


def save_map_json(psf_map: PsfMap, path):
    doc = {
        "image_width": psf_map.image_width,
        "image_height": psf_map.image_height,
        "window": psf_map.window,
        "stride": psf_map.stride,
        "n_params": psf_map.n_params,
        "cells": [
            [float(v) for v in psf_map.coeffs[i, j]]
            for i in range(psf_map.grid_rows)
            for j in range(psf_map.grid_cols)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_map_json(path) -> PsfMap:
    doc = json.loads(Path(path).read_text())
    rows, cols = map_grid_shape(
        doc["image_height"], doc["image_width"], doc["window"], doc["stride"]
    )
    cells = np.asarray(doc["cells"], dtype=float)
    if cells.shape != (rows * cols, doc["n_params"]):
        raise DomainError(
            f"cell table shape {cells.shape} inconsistent with geometry "
            f"({rows}x{cols}, {doc['n_params']} params)"
        )
    return PsfMap(
        window=doc["window"],
        stride=doc["stride"],
        coeffs=cells.reshape(rows, cols, doc["n_params"]),
        image_width=doc["image_width"],
        image_height=doc["image_height"],
    )


def render_map(psf_map: PsfMap, out_prefix, value_range=(0.0, 2.0)):
    """Write one false-color PNG per parameter next to the map file."""
    out_prefix = Path(out_prefix)
    paths = []
    for n in range(psf_map.n_params):
        path = out_prefix.with_name(f"{out_prefix.name}_a{n}.png")
        write_false_color(path, psf_map.coeffs[:, :, n], value_range[0], value_range[1])
        paths.append(path)
    return paths
