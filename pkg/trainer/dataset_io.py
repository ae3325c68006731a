"""Dataset directory loader.

Consumes the on-disk training-set contract: ``manifest.csv`` with header
``index,filename,scale,offset,a_0,...,a_{N-1}`` next to 16-bit grayscale PNG
patches. Pixels are de-quantized as ``png/65535*scale + offset`` and then
re-centered to zero mean, so training sees the same numerics as generation.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image


def load_manifest(data_dir):
    root = Path(data_dir)
    rows = []
    with open(root / "manifest.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["index", "filename", "scale", "offset"] or len(header) < 5:
            raise ValueError(f"unexpected manifest header: {header}")
        n_params = len(header) - 4
        for row in reader:
            rows.append(
                (
                    root / row[1],
                    float(row[2]),
                    float(row[3]),
                    np.array([float(v) for v in row[4:]], dtype=np.float32),
                )
            )
    return rows, n_params


def load_patch(path, scale, offset) -> np.ndarray:
    with Image.open(path) as im:
        quant = np.asarray(im, dtype=np.float32)
    patch = quant / 65535.0 * scale + offset
    return patch - patch.mean()


def load_dataset(data_dir, limit: int | None = None):
    """Load every pair into memory: (patches [K,1,H,W], labels [K,N])."""
    rows, n_params = load_manifest(data_dir)
    if limit is not None:
        rows = rows[:limit]
    if not rows:
        raise ValueError(f"empty dataset under {data_dir}")
    first = load_patch(*rows[0][:3])
    patches = np.empty((len(rows), 1, *first.shape), dtype=np.float32)
    labels = np.empty((len(rows), n_params), dtype=np.float32)
    patches[0, 0] = first
    labels[0] = rows[0][3]
    for k, (path, scale, offset, coeffs) in enumerate(rows[1:], start=1):
        patches[k, 0] = load_patch(path, scale, offset)
        labels[k] = coeffs
    return patches, labels
