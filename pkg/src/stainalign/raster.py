"""Image containers, pixel sampling, and resampling primitives.

Conventions used throughout the package: row-major storage, top-left
origin, x increases rightward, y increases downward. Point coordinates
are (x, y) in pixels. 8-bit storage for I/O rasters, float for all
intermediate computation. Sampling outside the valid pixel rectangle
returns a constant fill value (default 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InvalidArgumentError, InvalidChannelError, ShapeError

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Raster:
    """8-bit image with 1 or 3 channels, stored as (height, width, channels).

    Immutable after construction; safe to share across workers.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3:
            raise ShapeError(f"raster data must be 2-D or 3-D, got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise InvalidChannelError(f"raster must have 1 or 3 channels, got {arr.shape[2]}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"raster must be at least 1x1, got {arr.shape[:2]}")
        if arr.dtype != np.uint8:
            raise InvalidArgumentError(f"raster data must be uint8, got {arr.dtype}")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FloatRaster:
    """Single-channel real-valued image, shape (height, width). All values finite."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"float raster data must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"float raster must be at least 1x1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidArgumentError("float raster contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    """Boolean image, shape (height, width)."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise ShapeError(f"mask bits must be 2-D, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            arr = arr.astype(bool)
        object.__setattr__(self, "bits", _frozen(arr))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


def to_grayscale(img: Raster) -> FloatRaster:
    """Luminance of a 3-channel raster: 0.299 R + 0.587 G + 0.114 B."""
    if img.channels != 3:
        raise InvalidChannelError("to_grayscale requires a 3-channel raster")
    rgb = img.data.astype(np.float64)
    wr, wg, wb = GRAY_WEIGHTS
    return FloatRaster(wr * rgb[:, :, 0] + wg * rgb[:, :, 1] + wb * rgb[:, :, 2])


def sample_bilinear(values: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Bilinear sample of a 2-D float array at fractional coordinates.

    Coordinates outside [0, w-1] x [0, h-1] return `fill`. Vectorized over
    arbitrarily shaped coordinate arrays.
    """
    h, w = values.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)

    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0

    v00 = values[y0, x0]
    v01 = values[y0, x1]
    v10 = values[y1, x0]
    v11 = values[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    out = top * (1 - fy) + bot * fy
    return np.where(inside, out, fill)


def sample_nearest(values: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill) -> np.ndarray:
    """Nearest-neighbor sample of a 2-D array; out-of-bounds coordinates yield `fill`."""
    h, w = values.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xi = np.clip(np.rint(xs), 0, w - 1).astype(np.intp)
    yi = np.clip(np.rint(ys), 0, h - 1).astype(np.intp)
    out = values[yi, xi]
    return np.where(inside, out, fill)


def bilinear_sample(img: FloatRaster, x: float, y: float, fill: float = 0.0) -> float:
    """Bilinear interpolation of a single point; total function (fill outside)."""
    return float(sample_bilinear(img.data, np.float64(x), np.float64(y), fill=fill))


def gaussian_blur(values: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur with mirrored borders; no-op for sigma <= 0."""
    if sigma <= 0:
        return values
    return ndimage.gaussian_filter(values, sigma=sigma, mode="reflect")


def downscale(img: Raster, factor: float) -> Raster:
    """Shrink by `factor` >= 1: Gaussian pre-blur (sigma = 0.5 * factor), then resample.

    Output dimensions are ceil(original / factor). factor == 1 returns the
    input unchanged (no subsampling happens, so no anti-alias blur is needed).
    """
    if factor < 1:
        raise InvalidArgumentError(f"downscale factor must be >= 1, got {factor}")
    if factor == 1:
        return img
    out_w = int(np.ceil(img.width / factor))
    out_h = int(np.ceil(img.height / factor))
    xs = np.arange(out_w, dtype=np.float64) * factor
    ys = np.arange(out_h, dtype=np.float64) * factor
    gx, gy = np.meshgrid(xs, ys)
    out = np.empty((out_h, out_w, img.channels), dtype=np.uint8)
    for c in range(img.channels):
        blurred = gaussian_blur(img.data[:, :, c].astype(np.float64), 0.5 * factor)
        vals = sample_bilinear(blurred, gx, gy, fill=0.0)
        out[:, :, c] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    return Raster(out)


def load_image(path: str | Path) -> Raster:
    """Load an 8-bit PNG or TIFF as a Raster (grayscale stays 1-channel)."""
    with Image.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
            raise InvalidArgumentError(f"unsupported bit depth for {path}: mode {im.mode}")
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.uint8)
        elif im.mode == "LA":
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return Raster(arr)


def save_image(img: Raster, path: str | Path) -> None:
    """Save a Raster as PNG or TIFF depending on the file extension."""
    arr = img.data[:, :, 0] if img.channels == 1 else img.data
    Image.fromarray(arr).save(path)


def load_mask(path: str | Path) -> BinaryMask:
    """Load a mask image; any nonzero pixel is foreground."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return BinaryMask(arr > 0)


def save_mask(mask: BinaryMask, path: str | Path) -> None:
    """Save a mask as an 8-bit PNG (255 = foreground)."""
    Image.fromarray(mask.bits.astype(np.uint8) * 255).save(path)
