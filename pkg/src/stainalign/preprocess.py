"""Contrast enhancement, stain color deconvolution, and tissue masking.

These run before feature detection. Cross-stain pairs become comparable by
extracting the shared counterstain channel (hematoxylin marks nuclei in both
H&E and IHC slides) and stretching its contrast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DegenerateStainError, InvalidArgumentError, InvalidChannelError
from .raster import BinaryMask, FloatRaster, Raster, to_grayscale

# Published optical-density vectors (rows = stains, columns = R,G,B).
# The third row of each preset is the cross product of the first two,
# covering the color subspace the named stains leave unexplained.
_HE_ROWS = [[0.650, 0.704, 0.286], [0.072, 0.990, 0.105]]
_HDAB_ROWS = [[0.650, 0.704, 0.286], [0.268, 0.570, 0.776]]


@dataclass(frozen=True)
class StainMatrix:
    """3x3 matrix of unit-length stain optical-density vectors (rows = stains)."""

    vectors: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.shape != (3, 3):
            raise InvalidArgumentError(f"stain matrix must be 3x3, got {arr.shape}")
        norms = np.linalg.norm(arr, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidArgumentError(f"stain vectors must be unit length, norms {norms}")
        if abs(np.linalg.det(arr)) <= 1e-9:
            raise DegenerateStainError("stain matrix is singular")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "vectors", arr)

    @classmethod
    def from_rows(cls, rows) -> "StainMatrix":
        """Build from three RGB optical-density rows, normalizing each to unit length.

        A row of zeros is replaced by the cross product of the other two rows.
        """
        arr = np.asarray(rows, dtype=np.float64).reshape(3, 3).copy()
        for i in range(3):
            if np.allclose(arr[i], 0.0):
                arr[i] = np.cross(arr[(i + 1) % 3], arr[(i + 2) % 3])
        norms = np.linalg.norm(arr, axis=1)
        if np.any(norms < 1e-12):
            raise DegenerateStainError("stain matrix has a zero row that cannot be completed")
        return cls(arr / norms[:, np.newaxis])

    @classmethod
    def preset(cls, name: str) -> "StainMatrix":
        """Named presets: 'he' (hematoxylin+eosin) or 'hdab' (hematoxylin+DAB)."""
        key = name.lower().replace("&", "").replace("-", "").replace("_", "")
        if key == "he":
            rows = _HE_ROWS
        elif key == "hdab":
            rows = _HDAB_ROWS
        else:
            raise ConfigError(f"unknown stain preset {name!r} (expected 'he' or 'hdab')")
        return cls.from_rows(rows + [[0.0, 0.0, 0.0]])


@dataclass(frozen=True)
class PreprocessConfig:
    """Settings for the enhancement/deconvolution stage.

    stain_matrix None selects a preset per image automatically (whichever of
    'he'/'hdab' reconstructs that image's optical densities better), which is
    what makes cross-stain pairs comparable without per-slide configuration.
    deconvolution_channel 0 is the hematoxylin channel in both presets; that
    is the channel feature detection runs on.
    """

    low_percentile: float = 0.01
    high_percentile: float = 0.99
    stain_matrix: StainMatrix | None = None
    deconvolution_channel: int = 0
    tissue_threshold_method: str = "otsu"
    fixed_threshold: float = 200.0

    def __post_init__(self):
        if not 0 <= self.low_percentile < 1 or not 0 < self.high_percentile <= 1:
            raise ConfigError("percentiles must lie in [0,1)")
        if self.low_percentile >= self.high_percentile:
            raise ConfigError("low_percentile must be below high_percentile")
        if self.deconvolution_channel not in (0, 1, 2):
            raise ConfigError("deconvolution_channel must be 0, 1, or 2")
        if self.tissue_threshold_method not in ("otsu", "fixed"):
            raise ConfigError("tissue_threshold_method must be 'otsu' or 'fixed'")


def enhance_contrast(img: FloatRaster, low_percentile: float = 0.01, high_percentile: float = 0.99) -> FloatRaster:
    """Linear percentile stretch onto [0, 255], clamping outside.

    The low-percentile intensity maps to 0 and the high-percentile intensity
    to 255. Degenerate ranges (constant images) are returned unchanged.
    """
    if not 0 <= low_percentile < high_percentile <= 1:
        raise InvalidArgumentError("percentiles must satisfy 0 <= low < high <= 1")
    lo, hi = np.percentile(img.data, [low_percentile * 100.0, high_percentile * 100.0])
    if hi - lo < 1e-12:
        return FloatRaster(img.data)
    stretched = (img.data - lo) * (255.0 / (hi - lo))
    return FloatRaster(np.clip(stretched, 0.0, 255.0))


def optical_density(img: Raster) -> np.ndarray:
    """Per-channel optical density -log10(max(I,1)/255), shape (h, w, 3).

    The intensity floor of 1 keeps the density finite on black pixels.
    """
    if img.channels != 3:
        raise InvalidChannelError("optical density requires a 3-channel raster")
    intensity = np.maximum(img.data.astype(np.float64), 1.0)
    return -np.log10(intensity / 255.0)


def color_deconvolve(img: Raster, m: StainMatrix) -> tuple[FloatRaster, FloatRaster, FloatRaster]:
    """Unmix an RGB raster into three stain density maps.

    Solves OD = densities @ m per pixel and clamps densities below at 0.
    """
    od = optical_density(img)
    inv = np.linalg.inv(m.vectors)
    densities = od @ inv
    np.maximum(densities, 0.0, out=densities)
    return tuple(FloatRaster(densities[:, :, i]) for i in range(3))


def recompose(densities: np.ndarray, m: StainMatrix) -> Raster:
    """Inverse of color_deconvolve: densities (h, w, 3) back to an RGB raster."""
    od = np.asarray(densities, dtype=np.float64) @ m.vectors
    intensity = 255.0 * np.power(10.0, -od)
    return Raster(np.clip(np.rint(intensity), 0, 255).astype(np.uint8))


def choose_stain_matrix(img: Raster) -> StainMatrix:
    """Pick the preset whose two named stains best explain the image.

    Scores each preset on strongly stained pixels by the density mass falling
    into the complementary third channel plus any negative density mass; the
    preset leaving less unexplained wins, ties going to 'he'. Deterministic,
    so repeated runs pick the same matrix.
    """
    od = optical_density(img).reshape(-1, 3)
    strong = od[np.linalg.norm(od, axis=1) > 0.15]
    if len(strong) == 0:
        return StainMatrix.preset("he")
    if len(strong) > 100_000:
        strong = strong[:: len(strong) // 100_000 + 1]
    best: tuple[float, StainMatrix] | None = None
    for name in ("he", "hdab"):
        m = StainMatrix.preset(name)
        densities = strong @ np.linalg.inv(m.vectors)
        unexplained = float(np.abs(densities[:, 2]).mean() + np.abs(np.minimum(densities, 0.0)).mean())
        if best is None or unexplained < best[0]:
            best = (unexplained, m)
    return best[1]


def otsu_threshold(values: np.ndarray) -> float:
    """Otsu's threshold over a [0, 255] array; foreground is `value > threshold`."""
    hist, _ = np.histogram(np.clip(values, 0, 255), bins=256, range=(0, 256))
    hist = hist.astype(np.float64)
    total = hist.sum()
    w0 = np.cumsum(hist)
    w1 = total - w0
    cum_mean = np.cumsum(hist * np.arange(256))
    mean_total = cum_mean[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = cum_mean / w0
        mu1 = (mean_total - cum_mean) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    return float(np.argmax(between))


def majority_filter(bits: np.ndarray) -> np.ndarray:
    """One pass of 3x3 majority vote with replicated borders."""
    counts = ndimage.convolve(bits.astype(np.int8), np.ones((3, 3), dtype=np.int8), mode="nearest")
    return counts >= 5


def tissue_mask(img: Raster, cfg: PreprocessConfig | None = None) -> BinaryMask:
    """Foreground (tissue) mask: dark pixels against bright glass.

    Thresholds the inverted-brightness histogram (Otsu by default, fixed
    override available) and cleans the result with one 3x3 majority pass.
    """
    cfg = cfg or PreprocessConfig()
    gray = to_grayscale(img).data
    if cfg.tissue_threshold_method == "fixed":
        fg = gray < cfg.fixed_threshold
    else:
        inverted = 255.0 - gray
        fg = inverted > otsu_threshold(inverted)
    return BinaryMask(majority_filter(fg))
