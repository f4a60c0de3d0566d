"""Descriptor matching, robust consensus filtering, and affine estimation.

The consensus filter is a deterministic seed-and-expand scheme: the most
reliable matches by descriptor ratio seed a least-squares affine model, the
model's inlier set is expanded by a residual tolerance, and fitting repeats
until the set is stable. A classical randomized sample-consensus filter is
kept alongside as a comparison baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    ConsensusFailureError,
    DegenerateConfigurationError,
    InsufficientCorrespondencesError,
)
from .features import FeatureSet
from .geometry import AffineModel, affine_apply_many, affine_invert

_MATCH_CHUNK = 512
_SQRT2 = float(np.sqrt(2.0))


@dataclass(frozen=True)
class Correspondence:
    """A matched point pair with its nearest/second-nearest distance ratio."""

    source: tuple[float, float]
    target: tuple[float, float]
    ratio: float

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"match ratio must lie in [0, 1], got {self.ratio}")
        object.__setattr__(self, "source", (float(self.source[0]), float(self.source[1])))
        object.__setattr__(self, "target", (float(self.target[0]), float(self.target[1])))


@dataclass(frozen=True)
class FscParams:
    """Consensus-filter settings.

    strict_ratio selects the seed matches, loose_ratio the tentative pool;
    inliers are matches whose target lies within inlier_tolerance pixels of
    the model-mapped source.
    """

    loose_ratio: float = 0.85
    strict_ratio: float = 0.6
    inlier_tolerance: float = 5.0
    max_iterations: int = 20
    min_inliers: int = 6

    def __post_init__(self):
        if self.strict_ratio > self.loose_ratio:
            raise ConfigError("strict_ratio must not exceed loose_ratio")
        if self.inlier_tolerance <= 0:
            raise ConfigError("inlier_tolerance must be positive")
        if self.min_inliers < 3:
            raise ConfigError("min_inliers must be >= 3")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")


def source_points(matches) -> np.ndarray:
    return np.array([m.source for m in matches], dtype=np.float64).reshape(-1, 2)


def target_points(matches) -> np.ndarray:
    return np.array([m.target for m in matches], dtype=np.float64).reshape(-1, 2)


def match_descriptors(a: FeatureSet, b: FeatureSet, ratio_threshold: float = 0.85) -> list[Correspondence]:
    """Nearest-neighbor matches from a to b passing the distance-ratio test.

    One-to-one: when several queries claim the same target keypoint, only the
    lowest-ratio claim survives. Needs at least two descriptors in b for the
    ratio to be defined; otherwise no matches are returned.
    """
    if len(a) == 0 or len(b) < 2:
        return []
    da = a.descriptors
    db = b.descriptors
    nb2 = (db * db).sum(axis=1)
    claims: dict[int, tuple[float, int]] = {}
    for start in range(0, len(a), _MATCH_CHUNK):
        chunk = da[start : start + _MATCH_CHUNK]
        d2 = (chunk * chunk).sum(axis=1)[:, None] + nb2[None, :] - 2.0 * (chunk @ db.T)
        np.maximum(d2, 0.0, out=d2)
        two = np.argpartition(d2, 1, axis=1)[:, :2]
        rows = np.arange(len(chunk))
        pair = d2[rows[:, None], two]
        swap = pair[:, 0] > pair[:, 1]
        two[swap] = two[swap][:, ::-1]
        pair[swap] = pair[swap][:, ::-1]
        d1 = np.sqrt(pair[:, 0])
        d2nd = np.sqrt(pair[:, 1])
        ratios = np.where(d2nd > 0, d1 / np.maximum(d2nd, 1e-300), 1.0)
        for qi in range(len(chunk)):
            ratio = float(min(ratios[qi], 1.0))
            if ratio > ratio_threshold:
                continue
            ti = int(two[qi, 0])
            best = claims.get(ti)
            if best is None or ratio < best[0]:
                claims[ti] = (ratio, start + qi)
    out = []
    for ti in sorted(claims):
        ratio, qi = claims[ti]
        ka, kb = a.keypoints[qi], b.keypoints[ti]
        out.append(Correspondence(source=(ka.x, ka.y), target=(kb.x, kb.y), ratio=ratio))
    out.sort(key=lambda m: (m.ratio, m.source, m.target))
    return out


def _normalizer(pts: np.ndarray) -> AffineModel:
    """Similarity transform moving pts to zero centroid and RMS radius sqrt(2)."""
    centroid = pts.mean(axis=0)
    rms = np.sqrt(((pts - centroid) ** 2).sum(axis=1).mean())
    s = _SQRT2 / rms if rms > 1e-12 else 1.0
    return AffineModel(s, 0.0, 0.0, s, -s * centroid[0], -s * centroid[1])


def estimate_affine_lsq(matches) -> AffineModel:
    """Least-squares affine fit of >= 3 correspondences.

    Coordinates are normalized (centroid shift plus isotropic scale) before
    solving and the result is mapped back, which keeps the normal system well
    conditioned without changing the minimizer. Exactly interpolates three
    non-degenerate pairs.
    """
    matches = list(matches)
    if len(matches) < 3:
        raise InsufficientCorrespondencesError(f"affine fit needs >= 3 pairs, got {len(matches)}")
    src = source_points(matches)
    dst = target_points(matches)

    tn_src = _normalizer(src)
    tn_dst = _normalizer(dst)
    ns = affine_apply_many(tn_src, src)
    nd = affine_apply_many(tn_dst, dst)

    sv = np.linalg.svd(ns - ns.mean(axis=0), compute_uv=False)
    if sv[-1] <= 1e-8 * max(sv[0], 1.0):
        raise DegenerateConfigurationError("source points are collinear")

    design = np.column_stack([ns, np.ones(len(ns))])
    sol, _, _, _ = np.linalg.lstsq(design, nd, rcond=None)
    fitted = AffineModel(
        a11=sol[0, 0], a12=sol[1, 0], a21=sol[0, 1], a22=sol[1, 1], tx=sol[2, 0], ty=sol[2, 1]
    )
    return affine_invert(tn_dst).compose(fitted).compose(tn_src)


def residuals(model: AffineModel, matches) -> np.ndarray:
    """Euclidean distance between each target point and the mapped source point."""
    mapped = affine_apply_many(model, source_points(matches))
    return np.linalg.norm(target_points(matches) - mapped, axis=1)


def fsc_filter(
    tentative, p: FscParams | None = None, seed_model: AffineModel | None = None
) -> tuple[list[Correspondence], AffineModel]:
    """Deterministic seed-and-expand consensus over tentative matches.

    Seeds are the matches with ratio <= strict_ratio (the three lowest-ratio
    matches if fewer than three qualify). An affine model fit on the seeds is
    expanded to all matches within inlier_tolerance, refit, and iterated to a
    fixed point. An optional seed_model competes with the seed fit; whichever
    starts with more inliers wins, which lets a caller inject a strong prior.
    """
    p = p or FscParams()
    tentative = list(tentative)
    if len(tentative) < p.min_inliers:
        raise ConsensusFailureError(
            f"need at least {p.min_inliers} tentative matches, got {len(tentative)}"
        )

    by_ratio = sorted(range(len(tentative)), key=lambda i: (tentative[i].ratio, i))
    seed_idx = [i for i in by_ratio if tentative[i].ratio <= p.strict_ratio]
    if len(seed_idx) < 3:
        seed_idx = by_ratio[:3]
    try:
        model = estimate_affine_lsq([tentative[i] for i in seed_idx])
    except DegenerateConfigurationError:
        if seed_model is None:
            raise
        model = seed_model
    else:
        if seed_model is not None:
            fit_count = int((residuals(model, tentative) <= p.inlier_tolerance).sum())
            prior_count = int((residuals(seed_model, tentative) <= p.inlier_tolerance).sum())
            if prior_count > fit_count:
                model = seed_model

    prev: np.ndarray | None = None
    for _ in range(p.max_iterations):
        mask = residuals(model, tentative) <= p.inlier_tolerance
        if prev is not None and np.array_equal(mask, prev):
            break
        prev = mask
        if mask.sum() < 3:
            raise ConsensusFailureError(f"consensus collapsed to {int(mask.sum())} matches")
        model = estimate_affine_lsq([m for m, keep in zip(tentative, mask) if keep])
    else:
        mask = residuals(model, tentative) <= p.inlier_tolerance

    inliers = [m for m, keep in zip(tentative, mask) if keep]
    if len(inliers) < p.min_inliers:
        raise ConsensusFailureError(
            f"consensus kept {len(inliers)} matches, below minimum {p.min_inliers}"
        )
    if abs(model.det()) <= 1e-6:
        raise DegenerateConfigurationError(f"consensus model is degenerate (det {model.det():.3e})")
    return inliers, model


def ransac_filter(
    tentative, tolerance: float, iterations: int = 500, seed: int = 0, min_inliers: int = 6
) -> tuple[list[Correspondence], AffineModel]:
    """Classical random minimal-sample consensus; deterministic for a given seed.

    Hypotheses are affine fits of random 3-pair samples; the largest consensus
    set (ties broken by mean residual) is refit by least squares.
    """
    tentative = list(tentative)
    if len(tentative) < 3:
        raise InsufficientCorrespondencesError(f"need >= 3 tentative matches, got {len(tentative)}")
    rng = np.random.default_rng(seed)
    best_mask: np.ndarray | None = None
    best_key = (-1, -np.inf)
    for _ in range(iterations):
        idx = rng.choice(len(tentative), size=3, replace=False)
        try:
            model = estimate_affine_lsq([tentative[i] for i in idx])
        except DegenerateConfigurationError:
            continue
        res = residuals(model, tentative)
        mask = res <= tolerance
        count = int(mask.sum())
        if count < 3:
            continue
        key = (count, -float(res[mask].mean()))
        if key > best_key:
            best_key = key
            best_mask = mask
    if best_mask is None or int(best_mask.sum()) < min_inliers:
        found = 0 if best_mask is None else int(best_mask.sum())
        raise ConsensusFailureError(f"random consensus kept {found} matches, below {min_inliers}")
    inliers = [m for m, keep in zip(tentative, best_mask) if keep]
    model = estimate_affine_lsq(inliers)
    if abs(model.det()) <= 1e-6:
        raise DegenerateConfigurationError(f"consensus model is degenerate (det {model.det():.3e})")
    return inliers, model
