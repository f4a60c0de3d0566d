"""Two-step registration: affine pre-alignment, then non-rigid refinement.

Step 1 downscales both images to a working resolution, extracts keypoints
from the preprocessed counterstain channel, filters tentative matches by
consensus, and warps the source into the target frame. Step 2 re-detects
keypoints on the pre-aligned pair, gathers consensus matches separately in
horizontal portions of the image so control points cover the whole tissue,
merges them, and fits the local-weighted-mean warp.

Everything is deterministic: identical inputs and config give bit-identical
serialized results. Per-portion matching may run on a small thread pool
(capped by the STAINALIGN_THREADS environment variable); results are merged
in portion order, so parallelism never changes the output.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    ConsensusFailureError,
    DegenerateConfigurationError,
    DegenerateNeighborhoodError,
    InsufficientControlPointsError,
    InsufficientCorrespondencesError,
    InsufficientResolutionError,
    InvalidArgumentError,
    PrealignmentFailedError,
    RefinementFailedError,
)
from .features import FeatureSet, SiftParams, detect_and_describe
from .geometry import AffineModel, LwmModel, fit_lwm, lwm_apply_many, lwm_grid, warp_affine, warp_grid
from .matching import Correspondence, FscParams, fsc_filter, match_descriptors, residuals
from .preprocess import PreprocessConfig, StainMatrix, choose_stain_matrix, color_deconvolve, enhance_contrast
from .raster import FloatRaster, Raster, downscale

MIN_WORKING_DIM = 256

# Pipeline warps fill unmapped regions with white: empty slide area is glass,
# and black padding would dominate the optical-density statistics that the
# step-2 feature channel is normalized by.
WARP_FILL = 255.0


@dataclass(frozen=True)
class PipelineConfig:
    """Settings for the full two-step registration."""

    working_max_dim: int = 2048
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    sift: SiftParams = field(default_factory=SiftParams)
    fsc: FscParams = field(default_factory=FscParams)
    lwm_neighbors: int = 12
    tile_count: int = 3
    min_points_per_tile: int = 6

    def __post_init__(self):
        if self.working_max_dim < MIN_WORKING_DIM:
            raise ConfigError(f"working_max_dim must be >= {MIN_WORKING_DIM}")
        if self.tile_count < 1:
            raise ConfigError("tile_count must be >= 1")
        if self.lwm_neighbors < 6:
            raise ConfigError("lwm_neighbors must be >= 6")
        if self.min_points_per_tile < 0:
            raise ConfigError("min_points_per_tile must be >= 0")

    def to_dict(self) -> dict:
        return {
            "working_max_dim": self.working_max_dim,
            "preprocess": {
                "low_percentile": self.preprocess.low_percentile,
                "high_percentile": self.preprocess.high_percentile,
                "stain_matrix": (
                    None
                    if self.preprocess.stain_matrix is None
                    else [float(v) for v in self.preprocess.stain_matrix.vectors.ravel()]
                ),
                "deconvolution_channel": self.preprocess.deconvolution_channel,
                "tissue_threshold_method": self.preprocess.tissue_threshold_method,
                "fixed_threshold": self.preprocess.fixed_threshold,
            },
            "sift": {
                "octaves": self.sift.octaves,
                "scales_per_octave": self.sift.scales_per_octave,
                "base_sigma": self.sift.base_sigma,
                "contrast_threshold": self.sift.contrast_threshold,
                "edge_ratio_threshold": self.sift.edge_ratio_threshold,
                "max_keypoints": self.sift.max_keypoints,
            },
            "fsc": {
                "loose_ratio": self.fsc.loose_ratio,
                "strict_ratio": self.fsc.strict_ratio,
                "inlier_tolerance": self.fsc.inlier_tolerance,
                "max_iterations": self.fsc.max_iterations,
                "min_inliers": self.fsc.min_inliers,
            },
            "lwm_neighbors": self.lwm_neighbors,
            "tile_count": self.tile_count,
            "min_points_per_tile": self.min_points_per_tile,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        """Strict parser: unknown keys anywhere raise ConfigError."""
        base = cls()
        _check_keys(doc, {"working_max_dim", "preprocess", "sift", "fsc", "lwm_neighbors", "tile_count", "min_points_per_tile"}, "config")
        pre = dict(doc.get("preprocess", {}))
        _check_keys(pre, {"low_percentile", "high_percentile", "stain_matrix", "deconvolution_channel", "tissue_threshold_method", "fixed_threshold"}, "config.preprocess")
        if "stain_matrix" in pre and pre["stain_matrix"] is not None:
            raw = pre["stain_matrix"]
            pre["stain_matrix"] = StainMatrix.preset(raw) if isinstance(raw, str) else StainMatrix.from_rows(raw)
        sift = dict(doc.get("sift", {}))
        _check_keys(sift, {"octaves", "scales_per_octave", "base_sigma", "contrast_threshold", "edge_ratio_threshold", "max_keypoints"}, "config.sift")
        fsc = dict(doc.get("fsc", {}))
        _check_keys(fsc, {"loose_ratio", "strict_ratio", "inlier_tolerance", "max_iterations", "min_inliers"}, "config.fsc")
        try:
            return cls(
                working_max_dim=doc.get("working_max_dim", base.working_max_dim),
                preprocess=replace(base.preprocess, **pre),
                sift=replace(base.sift, **sift),
                fsc=replace(base.fsc, **fsc),
                lwm_neighbors=doc.get("lwm_neighbors", base.lwm_neighbors),
                tile_count=doc.get("tile_count", base.tile_count),
                min_points_per_tile=doc.get("min_points_per_tile", base.min_points_per_tile),
            )
        except TypeError as e:
            raise ConfigError(str(e)) from e


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class RegistrationResult:
    """Outcome of register(): models, control pairs, warped raster, diagnostics.

    affine maps source to target at working resolution. lwm_inverse maps
    target coordinates to pre-aligned-source coordinates (the orientation a
    warp needs); it is None in affine-only degraded mode, in which case the
    diagnostics carry the refinement-failure reason.
    """

    affine: AffineModel
    lwm_forward_pairs: tuple[Correspondence, ...]
    lwm_inverse: LwmModel | None
    warped: Raster | None
    diagnostics: dict
    source_size: tuple[int, int]
    target_size: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "affine": self.affine.to_list(),
            "lwm_inverse": self.lwm_inverse.to_dict() if self.lwm_inverse else None,
            "scale_factor": self.diagnostics.get("scale_factor", 1.0),
            "source_size": list(self.source_size),
            "target_size": list(self.target_size),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RegistrationResult":
        lwm = doc.get("lwm_inverse")
        return cls(
            affine=AffineModel.from_list(doc["affine"]),
            lwm_forward_pairs=(),
            lwm_inverse=LwmModel.from_dict(lwm) if lwm else None,
            warped=None,
            diagnostics=dict(doc.get("diagnostics", {})),
            source_size=tuple(doc["source_size"]),
            target_size=tuple(doc["target_size"]),
        )


def worker_count(n_tasks: int) -> int:
    """Worker cap for per-portion parallelism (STAINALIGN_THREADS overrides)."""
    env = os.environ.get("STAINALIGN_THREADS")
    try:
        cap = int(env) if env else (os.cpu_count() or 1)
    except ValueError:
        cap = 1
    return max(1, min(n_tasks, cap))


def band_index(y: float, height: int, tile_count: int) -> int:
    """Horizontal band (0-based) containing row y, bands of equal height."""
    return int(np.clip(np.floor(y * tile_count / height), 0, tile_count - 1))


def partition_indices(feats: FeatureSet, height: int, tile_count: int) -> list[np.ndarray]:
    """Keypoint indices per horizontal band; a disjoint cover of the set."""
    ys = np.array([kp.y for kp in feats.keypoints])
    if len(ys) == 0:
        return [np.array([], dtype=np.intp) for _ in range(tile_count)]
    bands = np.clip(np.floor(ys * tile_count / height).astype(np.intp), 0, tile_count - 1)
    return [np.nonzero(bands == b)[0] for b in range(tile_count)]


def preprocess_for_features(img: Raster, cfg: PreprocessConfig | None = None) -> FloatRaster:
    """Channel feature detection runs on: deconvolved stain density (or the
    raw channel for grayscale input), percentile contrast-stretched."""
    cfg = cfg or PreprocessConfig()
    if img.channels == 3:
        matrix = cfg.stain_matrix or choose_stain_matrix(img)
        channel = color_deconvolve(img, matrix)[cfg.deconvolution_channel]
    else:
        channel = FloatRaster(img.data[:, :, 0].astype(np.float64))
    return enhance_contrast(channel, cfg.low_percentile, cfg.high_percentile)


def _residual_stats(res: np.ndarray) -> dict:
    if len(res) == 0:
        return {"mean": 0.0, "rmse": 0.0, "max": 0.0}
    return {
        "mean": float(res.mean()),
        "rmse": float(np.sqrt((res**2).mean())),
        "max": float(res.max()),
    }


def _working_rasters(source: Raster, target: Raster, cfg: PipelineConfig) -> tuple[Raster, Raster, float]:
    """Downscale both images by one common factor onto the working resolution."""
    largest = max(source.width, source.height, target.width, target.height)
    factor = max(1.0, largest / cfg.working_max_dim)
    src = downscale(source, factor) if factor > 1 else source
    tgt = downscale(target, factor) if factor > 1 else target
    smallest = min(src.width, src.height, tgt.width, tgt.height)
    if smallest < MIN_WORKING_DIM:
        raise InsufficientResolutionError(
            f"images must be at least {MIN_WORKING_DIM} px on a side at working "
            f"resolution, got {smallest}"
        )
    return src, tgt, factor


def prealign(source: Raster, target: Raster, cfg: PipelineConfig | None = None) -> tuple[AffineModel, Raster, dict]:
    """Step 1: consensus-filtered affine estimation plus source warp.

    Returns (model mapping source to target at working resolution, pre-aligned
    source raster in the target frame, stage diagnostics).
    """
    cfg = cfg or PipelineConfig()
    src, tgt, factor = _working_rasters(source, target, cfg)
    return _prealign_working(src, tgt, factor, cfg)


def _prealign_working(src: Raster, tgt: Raster, factor: float, cfg: PipelineConfig) -> tuple[AffineModel, Raster, dict]:
    feats_src = detect_and_describe(preprocess_for_features(src, cfg.preprocess), cfg.sift)
    feats_tgt = detect_and_describe(preprocess_for_features(tgt, cfg.preprocess), cfg.sift)
    tentative = match_descriptors(feats_src, feats_tgt, cfg.fsc.loose_ratio)
    diag = {
        "scale_factor": float(factor),
        "source_size": [src.width, src.height],
        "target_size": [tgt.width, tgt.height],
        "keypoints_source": len(feats_src),
        "keypoints_target": len(feats_tgt),
        "tentative_matches": len(tentative),
    }
    try:
        inliers, model = fsc_filter(tentative, cfg.fsc)
    except (ConsensusFailureError, DegenerateConfigurationError, InsufficientCorrespondencesError) as e:
        raise PrealignmentFailedError(f"pre-alignment consensus failed: {e}", diagnostics=diag) from e
    diag["prealign_inliers"] = len(inliers)
    diag["prealign_residuals"] = _residual_stats(residuals(model, inliers))
    prealigned = warp_affine(src, model, tgt.width, tgt.height, fill=WARP_FILL)
    return model, prealigned, diag


def _portion_matches(
    feats_pre: FeatureSet, feats_tgt: FeatureSet, band: int, height: int, cfg: PipelineConfig
) -> tuple[list[Correspondence], dict]:
    """Consensus matches restricted to one horizontal band of the target frame."""
    idx_pre = partition_indices(feats_pre, height, cfg.tile_count)[band]
    idx_tgt = partition_indices(feats_tgt, height, cfg.tile_count)[band]
    info = {"portion": band, "keypoints_source": len(idx_pre), "keypoints_target": len(idx_tgt)}
    if len(idx_pre) == 0 or len(idx_tgt) < 2:
        info["skipped"] = "too few keypoints"
        return [], info
    tentative = match_descriptors(feats_pre.subset(idx_pre), feats_tgt.subset(idx_tgt), cfg.fsc.loose_ratio)
    info["tentative_matches"] = len(tentative)
    try:
        # The images are already pre-aligned, so the identity model is a
        # legitimate prior for sparse portions.
        inliers, model = fsc_filter(tentative, cfg.fsc, seed_model=AffineModel.identity())
    except (ConsensusFailureError, DegenerateConfigurationError, InsufficientCorrespondencesError) as e:
        info["skipped"] = str(e)
        return [], info
    if len(inliers) < cfg.min_points_per_tile:
        info["skipped"] = f"only {len(inliers)} inliers, below min_points_per_tile"
        return [], info
    info["inliers"] = len(inliers)
    info["residuals"] = _residual_stats(residuals(model, inliers))
    return inliers, info


def _dedupe_by_target(pairs: list[Correspondence]) -> list[Correspondence]:
    """Drop pairs whose target point collides with an earlier pair's (the
    target points anchor the inverse fit, which rejects duplicates)."""
    seen = set()
    out = []
    for m in pairs:
        key = (round(m.target[0], 3), round(m.target[1], 3))
        if key in seen:
            continue
        seen.add(key)
        out.append(m)
    return out


def refine_nonrigid(
    prealigned: Raster,
    target: Raster,
    affine: AffineModel,
    cfg: PipelineConfig | None = None,
    prealign_diagnostics: dict | None = None,
) -> RegistrationResult:
    """Step 2: local-weighted-mean refinement of a pre-aligned pair.

    Re-detects keypoints on both rasters (already in the same frame), gathers
    consensus matches per horizontal portion, merges them, fits the inverse
    warp on swapped pairs, and warps. Portions with too few inliers are
    skipped with a warning in the diagnostics; if the merged set is smaller
    than the neighbor count the whole refinement fails.
    """
    cfg = cfg or PipelineConfig()
    prior = dict(prealign_diagnostics or {})
    feats_pre = detect_and_describe(preprocess_for_features(prealigned, cfg.preprocess), cfg.sift)
    feats_tgt = detect_and_describe(preprocess_for_features(target, cfg.preprocess), cfg.sift)
    diag = dict(prior)
    diag.setdefault("scale_factor", 1.0)
    diag["refine_keypoints_source"] = len(feats_pre)
    diag["refine_keypoints_target"] = len(feats_tgt)

    bands = list(range(cfg.tile_count))
    workers = worker_count(len(bands))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_portion_matches, feats_pre, feats_tgt, b, target.height, cfg)
                for b in bands
            ]
            results = [f.result() for f in futures]
    else:
        results = [_portion_matches(feats_pre, feats_tgt, b, target.height, cfg) for b in bands]

    merged: list[Correspondence] = []
    diag["portions"] = []
    for inliers, info in results:
        diag["portions"].append(info)
        merged.extend(inliers)
    merged = _dedupe_by_target(merged)
    diag["merged_pairs"] = len(merged)

    source_size = tuple(prior.get("source_size", [prealigned.width, prealigned.height]))
    if len(merged) < cfg.lwm_neighbors:
        raise RefinementFailedError(
            f"only {len(merged)} merged control pairs, below lwm_neighbors {cfg.lwm_neighbors}",
            diagnostics=diag,
        )
    inverse_pairs = [(m.target, m.source) for m in merged]
    try:
        lwm_inverse = fit_lwm(inverse_pairs, cfg.lwm_neighbors)
    except (DegenerateNeighborhoodError, InsufficientControlPointsError, InvalidArgumentError) as e:
        raise RefinementFailedError(f"inverse warp fit failed: {e}", diagnostics=diag) from e

    targets = np.array([m.target for m in merged])
    sources = np.array([m.source for m in merged])
    mapped, _ = lwm_apply_many(lwm_inverse, targets)
    diag["lwm_residuals"] = _residual_stats(np.linalg.norm(mapped - sources, axis=1))

    map_x, map_y, extrapolated = lwm_grid(lwm_inverse, target.width, target.height)
    warped = warp_grid(prealigned, map_x, map_y, fill=WARP_FILL)
    diag["extrapolated_pixels"] = int(extrapolated.sum())
    diag["extrapolated_fraction"] = float(extrapolated.mean())
    diag["mode"] = "full"

    return RegistrationResult(
        affine=affine,
        lwm_forward_pairs=tuple(merged),
        lwm_inverse=lwm_inverse,
        warped=warped,
        diagnostics=diag,
        source_size=source_size,
        target_size=(target.width, target.height),
    )


def register(source: Raster, target: Raster, cfg: PipelineConfig | None = None) -> RegistrationResult:
    """Full two-step registration of source onto target.

    Falls back to an affine-only result (lwm fields empty, degraded-mode
    diagnostics) when refinement cannot gather enough control points;
    propagates PrealignmentFailedError when step 1 fails.
    """
    cfg = cfg or PipelineConfig()
    src, tgt, factor = _working_rasters(source, target, cfg)
    model, prealigned, diag = _prealign_working(src, tgt, factor, cfg)
    try:
        return refine_nonrigid(prealigned, tgt, model, cfg, prealign_diagnostics=diag)
    except RefinementFailedError as e:
        degraded = dict(e.diagnostics) if e.diagnostics else dict(diag)
        degraded["mode"] = "affine_only"
        degraded["degraded_reason"] = str(e)
        return RegistrationResult(
            affine=model,
            lwm_forward_pairs=(),
            lwm_inverse=None,
            warped=prealigned,
            diagnostics=degraded,
            source_size=(src.width, src.height),
            target_size=(tgt.width, tgt.height),
        )
