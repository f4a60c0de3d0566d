"""Scale-invariant keypoint detection and description.

Difference-of-Gaussians scale space, 3x3x3 extremum detection with quadratic
subpixel refinement, contrast and edge-ratio rejection, gradient-histogram
orientation assignment, and 4x4x8 gradient descriptors. Everything is
deterministic: identical image and parameters give identical output.

Intensities are normalized to [0, 1] internally, so the contrast threshold is
expressed on that scale. The input is assumed to carry a blur of sigma 0.5;
no initial upsampling is performed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InsufficientResolutionError
from .raster import FloatRaster

ASSUMED_BLUR = 0.5
MIN_OCTAVE_DIM = 16
DETECTION_BORDER = 5
MAX_REFINE_STEPS = 5
ORIENTATION_BINS = 36
ORIENTATION_PEAK_RATIO = 0.8
ORIENTATION_SIGMA_FACTOR = 1.5
ORIENTATION_RADIUS_FACTOR = 3.0
DESCRIPTOR_WIDTH = 4
DESCRIPTOR_BINS = 8
DESCRIPTOR_SCALE_FACTOR = 3.0
DESCRIPTOR_CLAMP = 0.2
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SiftParams:
    """Detector hyperparameters. octaves=None lets the image size decide
    (octaves are added until the smallest would fall under 16 px)."""

    octaves: int | None = None
    scales_per_octave: int = 3
    base_sigma: float = 1.6
    contrast_threshold: float = 0.03
    edge_ratio_threshold: float = 10.0
    max_keypoints: int = 0

    def __post_init__(self):
        if self.octaves is not None and self.octaves < 1:
            raise ConfigError("octaves must be >= 1 (or None for automatic)")
        if self.scales_per_octave < 1:
            raise ConfigError("scales_per_octave must be >= 1")
        if self.base_sigma <= 0:
            raise ConfigError("base_sigma must be positive")
        if self.edge_ratio_threshold <= 1:
            raise ConfigError("edge_ratio_threshold must be > 1")
        if self.contrast_threshold < 0:
            raise ConfigError("contrast_threshold must be >= 0")
        if self.max_keypoints < 0:
            raise ConfigError("max_keypoints must be >= 0 (0 = unlimited)")


@dataclass(frozen=True)
class Keypoint:
    """Interest point in full-resolution pixel coordinates.

    scale is the blob sigma in full-resolution pixels; orientation is in
    [0, 2*pi); response is the refined difference-of-Gaussians magnitude.
    """

    x: float
    y: float
    scale: float
    orientation: float
    response: float


@dataclass(frozen=True)
class FeatureSet:
    """Keypoints plus their 128-element unit descriptors, ordered by response."""

    keypoints: tuple[Keypoint, ...]
    descriptors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "keypoints", tuple(self.keypoints))
        desc = np.asarray(self.descriptors, dtype=np.float64).reshape(len(self.keypoints), 128)
        desc = desc.copy()
        desc.flags.writeable = False
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return len(self.keypoints)

    def subset(self, indices) -> "FeatureSet":
        indices = np.asarray(indices, dtype=np.intp)
        return FeatureSet(
            keypoints=tuple(self.keypoints[i] for i in indices),
            descriptors=self.descriptors[indices],
        )


class ScaleSpace:
    """Gaussian and difference-of-Gaussians pyramids for one image.

    gaussians[o][l] has blur base_sigma * 2**(o + l/S) in full-resolution
    pixels; dogs[o][l] = gaussians[o][l+1] - gaussians[o][l]. Octave o is
    sampled every 2**o pixels, so octave coordinates map to full resolution
    by plain multiplication.
    """

    def __init__(self, gaussians: list[list[np.ndarray]], params: SiftParams):
        self.gaussians = gaussians
        self.dogs = [[lv[i + 1] - lv[i] for i in range(len(lv) - 1)] for lv in gaussians]
        self.params = params
        self._gradients: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    @property
    def n_octaves(self) -> int:
        return len(self.gaussians)

    def gradient(self, octave: int, level: int) -> tuple[np.ndarray, np.ndarray]:
        """(gy, gx) central-difference gradients of one Gaussian level, cached."""
        key = (octave, level)
        if key not in self._gradients:
            g = self.gaussians[octave][level]
            gy, gx = np.gradient(g.astype(np.float64))
            self._gradients[key] = (gy, gx)
        return self._gradients[key]


def _auto_octaves(height: int, width: int) -> int:
    n = 0
    h, w = height, width
    while min(h, w) >= MIN_OCTAVE_DIM:
        n += 1
        h = -(-h // 2)
        w = -(-w // 2)
    return n


def build_scale_space(img: FloatRaster, p: SiftParams) -> ScaleSpace:
    """Construct the Gaussian/DoG pyramids for an image with min dimension >= 16."""
    if min(img.height, img.width) < MIN_OCTAVE_DIM:
        raise InsufficientResolutionError(
            f"image {img.width}x{img.height} is below the {MIN_OCTAVE_DIM} px minimum"
        )
    s = p.scales_per_octave
    n_octaves = _auto_octaves(img.height, img.width)
    if p.octaves is not None:
        n_octaves = min(n_octaves, p.octaves)

    level_sigmas = [p.base_sigma * 2.0 ** (l / s) for l in range(s + 3)]
    deltas = [math.sqrt(max(level_sigmas[l] ** 2 - level_sigmas[l - 1] ** 2, 1e-12)) for l in range(1, s + 3)]

    base = (img.data / 255.0).astype(np.float32)
    first_delta = math.sqrt(max(p.base_sigma**2 - ASSUMED_BLUR**2, 0.0))
    current = ndimage.gaussian_filter(base, first_delta, mode="reflect") if first_delta > 0 else base

    gaussians = []
    for _ in range(n_octaves):
        levels = [current]
        for delta in deltas:
            levels.append(ndimage.gaussian_filter(levels[-1], delta, mode="reflect"))
        gaussians.append(levels)
        # Level s has twice the octave's base blur; subsampling every other
        # pixel brings it back to base_sigma for the next octave.
        current = levels[s][::2, ::2]
    return ScaleSpace(gaussians, p)


def _refine_extremum(dogs: list[np.ndarray], level: int, i: int, j: int, p: SiftParams):
    """Quadratic subpixel/subscale refinement of one candidate extremum.

    Returns (level, i, j, dx, dy, ds, value) or None if the candidate drifts
    out of bounds, fails to converge, or fails the contrast/edge tests.
    """
    s = p.scales_per_octave
    h, w = dogs[0].shape
    for _ in range(MAX_REFINE_STEPS):
        cube = np.stack(
            [dogs[level - 1][i - 1 : i + 2, j - 1 : j + 2],
             dogs[level][i - 1 : i + 2, j - 1 : j + 2],
             dogs[level + 1][i - 1 : i + 2, j - 1 : j + 2]]
        ).astype(np.float64)
        gx = 0.5 * (cube[1, 1, 2] - cube[1, 1, 0])
        gy = 0.5 * (cube[1, 2, 1] - cube[1, 0, 1])
        gs = 0.5 * (cube[2, 1, 1] - cube[0, 1, 1])
        center = cube[1, 1, 1]
        hxx = cube[1, 1, 2] - 2 * center + cube[1, 1, 0]
        hyy = cube[1, 2, 1] - 2 * center + cube[1, 0, 1]
        hss = cube[2, 1, 1] - 2 * center + cube[0, 1, 1]
        hxy = 0.25 * (cube[1, 2, 2] - cube[1, 2, 0] - cube[1, 0, 2] + cube[1, 0, 0])
        hxs = 0.25 * (cube[2, 1, 2] - cube[2, 1, 0] - cube[0, 1, 2] + cube[0, 1, 0])
        hys = 0.25 * (cube[2, 2, 1] - cube[2, 0, 1] - cube[0, 2, 1] + cube[0, 0, 1])
        hess = np.array([[hxx, hxy, hxs], [hxy, hyy, hys], [hxs, hys, hss]])
        grad = np.array([gx, gy, gs])
        try:
            offset = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) < 0.5):
            value = center + 0.5 * float(grad @ offset)
            if abs(value) < p.contrast_threshold:
                return None
            tr = hxx + hyy
            det = hxx * hyy - hxy * hxy
            r = p.edge_ratio_threshold
            if det <= 0 or tr * tr * r >= det * (r + 1) ** 2:
                return None
            return level, i, j, float(offset[0]), float(offset[1]), float(offset[2]), value
        j += int(round(offset[0]))
        i += int(round(offset[1]))
        level += int(round(offset[2]))
        if (
            level < 1
            or level > s
            or i < DETECTION_BORDER
            or i >= h - DETECTION_BORDER
            or j < DETECTION_BORDER
            or j >= w - DETECTION_BORDER
        ):
            return None
    return None


def detect_keypoints(space: ScaleSpace, p: SiftParams | None = None) -> list[Keypoint]:
    """3x3x3 extrema of the DoG pyramid, refined and filtered.

    Orientations are left at 0; compute_descriptors assigns them. Emitted
    coordinates and scales are in full-resolution pixels.
    """
    p = p or space.params
    s = p.scales_per_octave
    prefilter = 0.5 * p.contrast_threshold
    found: dict[tuple[float, float, float], Keypoint] = {}
    for octave, dogs in enumerate(space.dogs):
        h, w = dogs[0].shape
        if h <= 2 * DETECTION_BORDER or w <= 2 * DETECTION_BORDER:
            continue
        stack = np.stack(dogs)
        maxf = ndimage.maximum_filter(stack, size=3, mode="constant", cval=np.inf * -1)
        minf = ndimage.minimum_filter(stack, size=3, mode="constant", cval=np.inf)
        cand = ((stack >= maxf) & (stack > prefilter)) | ((stack <= minf) & (stack < -prefilter))
        cand[0] = cand[s + 1] = False
        cand[:, :DETECTION_BORDER, :] = False
        cand[:, h - DETECTION_BORDER :, :] = False
        cand[:, :, :DETECTION_BORDER] = False
        cand[:, :, w - DETECTION_BORDER :] = False
        step = float(2**octave)
        for level, i, j in np.argwhere(cand):
            refined = _refine_extremum(dogs, int(level), int(i), int(j), p)
            if refined is None:
                continue
            rl, ri, rj, dx, dy, ds, value = refined
            kp = Keypoint(
                x=(rj + dx) * step,
                y=(ri + dy) * step,
                scale=p.base_sigma * 2.0 ** (octave + (rl + ds) / s),
                orientation=0.0,
                response=abs(value),
            )
            key = (round(kp.x, 4), round(kp.y, 4), round(kp.scale, 4))
            prior = found.get(key)
            if prior is None or kp.response > prior.response:
                found[key] = kp
    return list(found.values())


def _locate_level(space: ScaleSpace, scale: float) -> tuple[int, int]:
    """Octave and Gaussian level whose blur best matches a keypoint scale."""
    p = space.params
    s = p.scales_per_octave
    of = math.log2(max(scale, p.base_sigma) / p.base_sigma)
    octave = int(np.clip(math.floor(of + 1e-9), 0, space.n_octaves - 1))
    level = int(np.clip(round((of - octave) * s), 0, s + 2))
    return octave, level


def _orientations(space: ScaleSpace, kp: Keypoint, octave: int, level: int) -> list[float]:
    gy, gx = space.gradient(octave, level)
    h, w = gx.shape
    step = float(2**octave)
    cx, cy = kp.x / step, kp.y / step
    sigma = ORIENTATION_SIGMA_FACTOR * kp.scale / step
    radius = max(int(round(ORIENTATION_RADIUS_FACTOR * sigma)), 1)
    x0, x1 = max(int(round(cx)) - radius, 0), min(int(round(cx)) + radius + 1, w)
    y0, y1 = max(int(round(cy)) - radius, 0), min(int(round(cy)) + radius + 1, h)
    if x0 >= x1 or y0 >= y1:
        return []
    pgx = gx[y0:y1, x0:x1]
    pgy = gy[y0:y1, x0:x1]
    xs, ys = np.meshgrid(np.arange(x0, x1) - cx, np.arange(y0, y1) - cy)
    weight = np.exp(-(xs * xs + ys * ys) / (2.0 * sigma * sigma))
    mag = np.hypot(pgx, pgy)
    ang = np.mod(np.arctan2(pgy, pgx), TWO_PI)
    bins = np.rint(ang * (ORIENTATION_BINS / TWO_PI)).astype(int) % ORIENTATION_BINS
    hist = np.bincount(bins.ravel(), weights=(weight * mag).ravel(), minlength=ORIENTATION_BINS)

    smooth = (
        6 * hist
        + 4 * (np.roll(hist, 1) + np.roll(hist, -1))
        + np.roll(hist, 2)
        + np.roll(hist, -2)
    ) / 16.0
    peak_value = smooth.max()
    if peak_value <= 0:
        return []
    left = np.roll(smooth, 1)
    right = np.roll(smooth, -1)
    peaks = np.nonzero((smooth > left) & (smooth > right) & (smooth >= ORIENTATION_PEAK_RATIO * peak_value))[0]
    out = []
    for idx in peaks:
        denom = left[idx] - 2 * smooth[idx] + right[idx]
        interp = idx + (0.5 * (left[idx] - right[idx]) / denom if denom != 0 else 0.0)
        out.append(float(np.mod(interp * (TWO_PI / ORIENTATION_BINS), TWO_PI)))
    return out


def _descriptor(space: ScaleSpace, kp: Keypoint, octave: int, level: int, theta: float) -> np.ndarray | None:
    gy, gx = space.gradient(octave, level)
    h, w = gx.shape
    step = float(2**octave)
    cx, cy = kp.x / step, kp.y / step
    hist_width = DESCRIPTOR_SCALE_FACTOR * kp.scale / step
    half = int(round(hist_width * math.sqrt(2) * (DESCRIPTOR_WIDTH + 1) * 0.5))
    half = min(half, int(math.hypot(h, w)))
    ix, iy = int(round(cx)), int(round(cy))
    x0, x1 = max(ix - half, 0), min(ix + half + 1, w)
    y0, y1 = max(iy - half, 0), min(iy + half + 1, h)
    if x1 - x0 < 2 or y1 - y0 < 2:
        return None

    xs, ys = np.meshgrid(np.arange(x0, x1) - cx, np.arange(y0, y1) - cy)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    u = (cos_t * xs + sin_t * ys) / hist_width
    v = (-sin_t * xs + cos_t * ys) / hist_width
    col_bin = u + 0.5 * DESCRIPTOR_WIDTH - 0.5
    row_bin = v + 0.5 * DESCRIPTOR_WIDTH - 0.5
    valid = (row_bin > -1) & (row_bin < DESCRIPTOR_WIDTH) & (col_bin > -1) & (col_bin < DESCRIPTOR_WIDTH)
    if not valid.any():
        return None

    pgx = gx[y0:y1, x0:x1][valid]
    pgy = gy[y0:y1, x0:x1][valid]
    mag = np.hypot(pgx, pgy)
    ang = np.mod(np.arctan2(pgy, pgx) - theta, TWO_PI)
    weight = np.exp(-(u[valid] ** 2 + v[valid] ** 2) / (0.5 * DESCRIPTOR_WIDTH**2))
    rb = row_bin[valid]
    cb = col_bin[valid]
    ob = ang * (DESCRIPTOR_BINS / TWO_PI)

    r0 = np.floor(rb).astype(int)
    c0 = np.floor(cb).astype(int)
    o0 = np.floor(ob).astype(int) % DESCRIPTOR_BINS
    rf = rb - np.floor(rb)
    cf = cb - np.floor(cb)
    of = ob - np.floor(ob)

    tensor = np.zeros((DESCRIPTOR_WIDTH + 2, DESCRIPTOR_WIDTH + 2, DESCRIPTOR_BINS))
    contrib = weight * mag
    for dr in (0, 1):
        wr = contrib * (rf if dr else 1 - rf)
        for dc in (0, 1):
            wc = wr * (cf if dc else 1 - cf)
            for do in (0, 1):
                wo = wc * (of if do else 1 - of)
                np.add.at(tensor, (r0 + 1 + dr, c0 + 1 + dc, (o0 + do) % DESCRIPTOR_BINS), wo)

    desc = tensor[1:-1, 1:-1, :].ravel()
    norm = np.linalg.norm(desc)
    if norm < 1e-12:
        return None
    desc = desc / norm
    np.minimum(desc, DESCRIPTOR_CLAMP, out=desc)
    desc /= np.linalg.norm(desc)
    return desc


def compute_descriptors(space: ScaleSpace, keypoints) -> tuple[list[Keypoint], np.ndarray]:
    """Assign orientations and build descriptors.

    A 36-bin gradient-orientation histogram picks the dominant directions;
    every peak at >= 80% of the maximum spawns its own oriented keypoint.
    Keypoints whose sampling window degenerates are dropped, so the output
    may be shorter (or longer, via orientation duplicates) than the input.
    """
    out_kps: list[Keypoint] = []
    out_desc: list[np.ndarray] = []
    for kp in keypoints:
        octave, level = _locate_level(space, kp.scale)
        for theta in _orientations(space, kp, octave, level):
            desc = _descriptor(space, kp, octave, level, theta)
            if desc is None:
                continue
            out_kps.append(Keypoint(kp.x, kp.y, kp.scale, theta, kp.response))
            out_desc.append(desc)
    if not out_kps:
        return [], np.zeros((0, 128))
    return out_kps, np.stack(out_desc)


def detect_and_describe(img: FloatRaster, p: SiftParams | None = None) -> FeatureSet:
    """Full detection pipeline; result sorted by descending response.

    With max_keypoints > 0, only the strongest keypoints are kept.
    """
    p = p or SiftParams()
    space = build_scale_space(img, p)
    kps = detect_keypoints(space, p)
    kps, desc = compute_descriptors(space, kps)
    if not kps:
        return FeatureSet(keypoints=(), descriptors=np.zeros((0, 128)))
    order = sorted(
        range(len(kps)),
        key=lambda i: (-kps[i].response, kps[i].x, kps[i].y, kps[i].scale, kps[i].orientation),
    )
    if p.max_keypoints > 0:
        order = order[: p.max_keypoints]
    return FeatureSet(
        keypoints=tuple(kps[i] for i in order),
        descriptors=desc[np.asarray(order, dtype=np.intp)],
    )
