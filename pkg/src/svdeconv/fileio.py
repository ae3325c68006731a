"""Image and kernel file I/O.

Two raster formats are supported: grayscale PNG (8 or 16 bit read, 16 bit
write) and the float raster format used for lossless interchange:

    bytes 0-7   magic "PSFRAW01"
    bytes 8-11  height, 32-bit little-endian unsigned
    bytes 12-15 width, 32-bit little-endian unsigned
    remainder   row-major float64 little-endian values

``save_image``/``read_image`` dispatch on the ``.psfraw`` extension so every
CLI path accepts either representation.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DomainError, FileFormatError

PSFRAW_MAGIC = b"PSFRAW01"


def write_psfraw(path, array):
    arr = np.asarray(array, dtype="<f8")
    if arr.ndim != 2:
        raise DomainError(f"psfraw stores 2-D rasters, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(PSFRAW_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_psfraw(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != PSFRAW_MAGIC:
        raise FileFormatError(f"{path}: missing PSFRAW01 magic header")
    h, w = struct.unpack("<II", data[8:16])
    expected = 16 + 8 * h * w
    if len(data) != expected:
        raise FileFormatError(f"{path}: expected {expected} bytes for {h}x{w}, got {len(data)}")
    return np.frombuffer(data[16:], dtype="<f8").reshape(h, w).astype(float)


def write_png16(path, image, lo=None, hi=None):
    """Write a 16-bit grayscale PNG, affinely rescaling [lo, hi] to [0, 65535].

    Defaults map the image min/max; a constant image writes zeros. Returns
    the (scale, offset) pair reconstructing values as ``png/65535*scale+offset``.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise DomainError(f"PNG write expects a 2-D image, got shape {img.shape}")
    lo = float(img.min()) if lo is None else float(lo)
    hi = float(img.max()) if hi is None else float(hi)
    scale = hi - lo
    if scale > 0.0:
        quant = np.clip(np.round((img - lo) / scale * 65535.0), 0, 65535).astype(np.uint16)
    else:
        quant = np.zeros(img.shape, dtype=np.uint16)
    PILImage.fromarray(quant).save(path, format="PNG")
    return scale, lo


def read_png_gray(path):
    """Read an 8- or 16-bit grayscale PNG as float64 in native units."""
    with PILImage.open(path) as im:
        if im.mode == "L":
            return np.asarray(im, dtype=float)
        if im.mode in ("I;16", "I;16B", "I"):
            return np.asarray(im, dtype=float)
        raise FileFormatError(f"{path}: expected grayscale PNG, got mode {im.mode!r}")


def read_image(path):
    path = Path(path)
    if path.suffix == ".psfraw":
        return read_psfraw(path)
    return read_png_gray(path)


def save_image(path, image):
    """Write ``image`` as .psfraw (lossless) or 16-bit PNG by extension."""
    path = Path(path)
    if path.suffix == ".psfraw":
        write_psfraw(path, image)
    else:
        write_png16(path, image)


def write_psf_preview(path, kernel):
    """Max-normalized 16-bit PNG preview of a kernel for human inspection."""
    k = np.asarray(kernel, dtype=float)
    peak = k.max()
    write_png16(path, k / peak if peak > 0 else k, lo=0.0, hi=1.0)


# Compact dark-blue-to-yellow lookup table for false-color map rendering.
_FALSE_COLOR_ANCHORS = np.array(
    [
        [0.267, 0.005, 0.329],
        [0.283, 0.141, 0.458],
        [0.254, 0.265, 0.530],
        [0.207, 0.372, 0.553],
        [0.164, 0.471, 0.558],
        [0.128, 0.567, 0.551],
        [0.135, 0.659, 0.518],
        [0.267, 0.749, 0.441],
        [0.478, 0.821, 0.318],
        [0.741, 0.873, 0.150],
        [0.993, 0.906, 0.144],
    ]
)


def write_false_color(path, values, vmin: float, vmax: float):
    """Render a scalar field to an RGB PNG with a dark-blue-to-yellow ramp."""
    v = np.asarray(values, dtype=float)
    if vmax <= vmin:
        raise DomainError("vmax must exceed vmin")
    t = np.clip((v - vmin) / (vmax - vmin), 0.0, 1.0)
    pos = t * (len(_FALSE_COLOR_ANCHORS) - 1)
    idx = np.minimum(pos.astype(int), len(_FALSE_COLOR_ANCHORS) - 2)
    frac = (pos - idx)[..., None]
    rgb = _FALSE_COLOR_ANCHORS[idx] * (1.0 - frac) + _FALSE_COLOR_ANCHORS[idx + 1] * frac
    PILImage.fromarray((rgb * 255.0).round().astype(np.uint8), mode="RGB").save(
        path, format="PNG"
    )
