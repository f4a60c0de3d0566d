"""Jaccard evaluation, landmark error metrics, and synthetic ground truth.

Real multi-stain slide pairs are rarely shareable, so this module can also
manufacture test pairs with exactly known geometry: a base image is warped by
a known affine composed with a smooth sinusoidal displacement field, then
optionally recolored from one stain pair to another through density space.
The generated truth object maps any point between the two frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import InvalidArgumentError, ShapeError
from .geometry import AffineModel, affine_apply_many, affine_invert, lwm_apply_many, lwm_grid
from .matching import Correspondence
from .pipeline import RegistrationResult
from .preprocess import StainMatrix, color_deconvolve, recompose, tissue_mask
from .raster import BinaryMask, Raster, gaussian_blur, sample_bilinear, sample_nearest


@dataclass(frozen=True)
class Metrics:
    """Registration quality summary."""

    jaccard: float
    control_rmse: float | None = None
    landmark_mean_error: float | None = None
    extrapolated_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.jaccard <= 1.0:
            raise InvalidArgumentError(f"jaccard must lie in [0,1], got {self.jaccard}")

    def to_dict(self) -> dict:
        return {
            "jaccard": self.jaccard,
            "control_rmse": self.control_rmse,
            "landmark_mean_error": self.landmark_mean_error,
            "extrapolated_fraction": self.extrapolated_fraction,
        }

    def csv_row(self, pair_id: str) -> str:
        rmse = "" if self.control_rmse is None else f"{self.control_rmse:.6g}"
        return f"{pair_id},{self.jaccard:.6g},{rmse},{self.extrapolated_fraction:.6g}"


class LandmarkStats(NamedTuple):
    mean: float
    rmse: float
    max: float


def jaccard(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two masks; two empty masks count as identical (1.0)."""
    if (a.height, a.width) != (b.height, b.width):
        raise ShapeError(f"mask shapes differ: {a.width}x{a.height} vs {b.width}x{b.height}")
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.bits, b.bits).sum() / union)


def landmark_error(mapper: Callable, pairs) -> LandmarkStats:
    """Distance statistics between mapped source landmarks and their targets.

    `mapper` takes one (x, y) point and returns the mapped point; `pairs` is a
    sequence of Correspondence or ((sx, sy), (tx, ty)) tuples.
    """
    pairs = list(pairs)
    if not pairs:
        raise InvalidArgumentError("landmark_error needs at least one pair")
    errs = []
    for p in pairs:
        src, tgt = (p.source, p.target) if isinstance(p, Correspondence) else (p[0], p[1])
        mx, my = mapper(src)
        errs.append(math.hypot(mx - tgt[0], my - tgt[1]))
    errs = np.asarray(errs)
    return LandmarkStats(float(errs.mean()), float(np.sqrt((errs**2).mean())), float(errs.max()))


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic deformation: affine about the image center
    (rotation, scale, translation) plus a sinusoidal displacement field."""

    rotation: float = 0.0
    scale: float = 1.0
    translation: tuple[float, float] = (0.0, 0.0)
    deform_amplitude: float = 0.0
    deform_wavelength: float = 64.0
    recolor: tuple[StainMatrix, StainMatrix] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scale <= 0:
            raise InvalidArgumentError("scale must be positive")
        if self.deform_amplitude < 0:
            raise InvalidArgumentError("deform_amplitude must be >= 0")
        if self.deform_amplitude > 0 and self.deform_wavelength <= 2 * self.deform_amplitude:
            raise InvalidArgumentError("deform_wavelength must exceed twice the amplitude")
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))


class SynthTruth:
    """Exact ground-truth mapping of a synthetic pair.

    The source image is built so that source(p) shows the target content at
    map_source_to_target(p) = affine(p) + displacement(affine(p)). The affine
    is the model step-1 registration should recover (source to target).
    """

    def __init__(self, affine: AffineModel, amplitude: float, wavelength: float, phases: tuple[float, float]):
        self.affine = affine
        self.amplitude = amplitude
        self.wavelength = wavelength
        self.phases = phases

    def displacement(self, pts: np.ndarray) -> np.ndarray:
        """Sinusoidal field in target coordinates: one sinusoid per axis,
        each varying along the orthogonal axis."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        if self.amplitude == 0:
            return np.zeros_like(pts)
        k = 2.0 * math.pi / self.wavelength
        dx = self.amplitude * np.sin(k * pts[:, 1] + self.phases[0])
        dy = self.amplitude * np.sin(k * pts[:, 0] + self.phases[1])
        return np.column_stack([dx, dy])

    def map_source_to_target(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        base = affine_apply_many(self.affine, pts)
        return base + self.displacement(base)

    def map_target_to_source(self, pts: np.ndarray, iterations: int = 50, tol: float = 1e-9) -> np.ndarray:
        """Numeric inverse by fixed-point iteration (the displacement is a
        small smooth perturbation, so the iteration contracts)."""
        q = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        y = q.copy()
        for _ in range(iterations):
            y_next = q - self.displacement(y)
            if np.abs(y_next - y).max() < tol:
                y = y_next
                break
            y = y_next
        return affine_apply_many(affine_invert(self.affine), y)


def _center_affine(spec: SynthSpec, width: int, height: int) -> AffineModel:
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    lin = spec.scale * np.array([[c, -s], [s, c]])
    shift = np.array([cx, cy])
    tr = shift - lin @ shift + np.asarray(spec.translation)
    return AffineModel.from_linear(lin, tr)


def synth_pair(base: Raster, spec: SynthSpec) -> tuple[Raster, Raster, SynthTruth, AffineModel]:
    """Manufacture a (source, target) pair with exact ground truth.

    target is the base image; source shows the same tissue seen through the
    inverse of the truth mapping, on a white background (empty glass), and is
    optionally recolored between stain conventions through density space.
    Requires at least 70% of the target tissue to stay inside the source frame.
    """
    rng = np.random.default_rng(spec.seed)
    phases = (float(rng.uniform(0, 2 * math.pi)), float(rng.uniform(0, 2 * math.pi)))
    truth = SynthTruth(_center_affine(spec, base.width, base.height), spec.deform_amplitude, spec.deform_wavelength, phases)

    tissue = tissue_mask(base)
    ty, tx = np.nonzero(tissue.bits)
    if len(tx):
        pts = np.column_stack([tx, ty]).astype(np.float64)
        mapped = truth.map_target_to_source(pts)
        inside = (
            (mapped[:, 0] >= 0)
            & (mapped[:, 0] <= base.width - 1)
            & (mapped[:, 1] >= 0)
            & (mapped[:, 1] <= base.height - 1)
        )
        if inside.mean() < 0.70:
            raise InvalidArgumentError(
                f"only {inside.mean():.0%} of the tissue stays in frame; reduce the transform"
            )

    us, vs = np.meshgrid(np.arange(base.width, dtype=np.float64), np.arange(base.height, dtype=np.float64))
    grid = np.column_stack([us.ravel(), vs.ravel()])
    sample_at = truth.map_source_to_target(grid)
    mx = sample_at[:, 0].reshape(base.height, base.width)
    my = sample_at[:, 1].reshape(base.height, base.width)
    out = np.empty_like(base.data)
    for c in range(base.channels):
        vals = sample_bilinear(base.data[:, :, c].astype(np.float64), mx, my, fill=255.0)
        out[:, :, c] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    source = Raster(out)

    if spec.recolor is not None:
        m_from, m_to = spec.recolor
        densities = np.stack([ch.data for ch in color_deconvolve(source, m_from)], axis=-1)
        source = recompose(densities, m_to)
    return source, base, truth, truth.affine


def forward_mapper(result: RegistrationResult) -> Callable:
    """Source-to-target point mapping of a registration result.

    The stored warp model runs target-to-source, so the forward direction
    inverts it by fixed-point iteration seeded at the affine prediction (the
    residual warp after pre-alignment is a small perturbation of identity).
    """

    def mapper(pt) -> tuple[float, float]:
        p_pre = np.atleast_2d(affine_apply_many(result.affine, np.asarray([pt], dtype=np.float64)))[0]
        if result.lwm_inverse is None:
            return (float(p_pre[0]), float(p_pre[1]))
        q = p_pre.copy()
        for _ in range(100):
            mapped, _ = lwm_apply_many(result.lwm_inverse, q[np.newaxis, :])
            delta = mapped[0] - p_pre
            if np.abs(delta).max() < 1e-9:
                break
            q = q - delta
        return (float(q[0]), float(q[1]))

    return mapper


def _chain_grid(result: RegistrationResult) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Target-pixel to source-coordinate maps for the full transform chain."""
    w, h = result.target_size
    if result.lwm_inverse is not None:
        mx, my, extrapolated = lwm_grid(result.lwm_inverse, w, h)
    else:
        us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        mx, my = us, vs
        extrapolated = np.zeros((h, w), dtype=bool)
    inv = affine_invert(result.affine)
    sx = inv.a11 * mx + inv.a12 * my + inv.tx
    sy = inv.a21 * mx + inv.a22 * my + inv.ty
    return sx, sy, extrapolated


def warp_mask(result: RegistrationResult, source_mask: BinaryMask) -> BinaryMask:
    """Carry a source-frame mask through the result's transform chain.

    Nearest-neighbor sampling keeps the mask strictly binary; pixels mapping
    outside the source are background.
    """
    if (source_mask.width, source_mask.height) != tuple(result.source_size):
        raise ShapeError(
            f"source mask is {source_mask.width}x{source_mask.height}, "
            f"expected {result.source_size[0]}x{result.source_size[1]}"
        )
    sx, sy, _ = _chain_grid(result)
    warped = sample_nearest(source_mask.bits, sx, sy, fill=False)
    return BinaryMask(warped.astype(bool))


def evaluate(
    result: RegistrationResult,
    source_mask: BinaryMask,
    target_mask: BinaryMask,
    truth: SynthTruth | None = None,
    landmarks=None,
) -> Metrics:
    """Score a registration result.

    Warps the source tissue mask through the transform chain and compares it
    with the target mask by Jaccard index. With ground truth, also reports
    the control-point RMSE against the true mapping; with landmark pairs, the
    mean landmark error of the forward mapping.
    """
    if (target_mask.width, target_mask.height) != tuple(result.target_size):
        raise ShapeError(
            f"target mask is {target_mask.width}x{target_mask.height}, "
            f"expected {result.target_size[0]}x{result.target_size[1]}"
        )
    sx, sy, extrapolated = _chain_grid(result)
    if (source_mask.width, source_mask.height) != tuple(result.source_size):
        raise ShapeError(
            f"source mask is {source_mask.width}x{source_mask.height}, "
            f"expected {result.source_size[0]}x{result.source_size[1]}"
        )
    warped = BinaryMask(sample_nearest(source_mask.bits, sx, sy, fill=False).astype(bool))
    score = jaccard(warped, target_mask)

    control_rmse = None
    if truth is not None and result.lwm_forward_pairs:
        pre_pts = np.array([m.source for m in result.lwm_forward_pairs])
        tgt_pts = np.array([m.target for m in result.lwm_forward_pairs])
        src_pts = affine_apply_many(affine_invert(result.affine), pre_pts)
        true_tgt = truth.map_source_to_target(src_pts)
        control_rmse = float(np.sqrt(((tgt_pts - true_tgt) ** 2).sum(axis=1).mean()))

    landmark_mean = None
    if landmarks:
        landmark_mean = landmark_error(forward_mapper(result), landmarks).mean

    extrapolated_fraction = float(extrapolated.mean()) if result.lwm_inverse is not None else 0.0
    return Metrics(
        jaccard=score,
        control_rmse=control_rmse,
        landmark_mean_error=landmark_mean,
        extrapolated_fraction=extrapolated_fraction,
    )


def synthetic_histology(
    width: int = 512,
    height: int = 512,
    seed: int = 0,
    stain: StainMatrix | None = None,
    nucleus_count: int | None = None,
) -> Raster:
    """Deterministic histology-like test image.

    A smooth irregular tissue region on white glass, with blob-like nuclei in
    the first stain channel and a softer cytoplasm texture in the second,
    composed through density space so stain unmixing is exact by construction.
    """
    stain = stain or StainMatrix.preset("he")
    rng = np.random.default_rng(seed)

    # Irregular tissue blob, kept away from the borders.
    noise = gaussian_blur(rng.standard_normal((height, width)), sigma=min(width, height) / 10.0)
    ys, xs = np.mgrid[0:height, 0:width]
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    radial = np.hypot((xs - cx) / (0.38 * width), (ys - cy) / (0.38 * height))
    field = noise / max(np.abs(noise).max(), 1e-9) - (radial**2)
    tissue = (field > np.percentile(field, 60)).astype(np.float64)
    tissue = gaussian_blur(tissue, sigma=3.0)

    # Nuclei: small dense blobs scattered inside the tissue.
    count = nucleus_count if nucleus_count is not None else max(60, width * height // 300)
    ny = rng.uniform(0, height, size=count)
    nx = rng.uniform(0, width, size=count)
    dots = np.zeros((height, width))
    amp = rng.uniform(0.6, 1.4, size=count)
    np.add.at(dots, (np.clip(ny.astype(int), 0, height - 1), np.clip(nx.astype(int), 0, width - 1)), amp)
    nuclei = gaussian_blur(dots, sigma=1.8)
    nuclei = nuclei / max(nuclei.max(), 1e-9) * 1.1 * tissue

    cyto = gaussian_blur(rng.standard_normal((height, width)), sigma=6.0)
    cyto = (0.25 + 0.15 * cyto / max(np.abs(cyto).max(), 1e-9)) * tissue

    densities = np.stack([nuclei + 0.06 * tissue, cyto, np.zeros_like(cyto)], axis=-1)
    return recompose(densities, stain)
