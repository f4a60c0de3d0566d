"""Planar affine and local-weighted-mean transforms, and raster warping.

An affine model carries the 6 parameters of a planar map. A local-weighted-mean
model carries one second-order polynomial per control point, each fit over that
control's nearest neighbors, blended with compactly supported weights. Warps
use inverse mapping: the model handed to a warp maps output coordinates to
source coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateConfigurationError,
    DegenerateNeighborhoodError,
    InsufficientControlPointsError,
    InvalidArgumentError,
    InvalidModelError,
)
from .raster import Raster, sample_bilinear


@dataclass(frozen=True)
class AffineModel:
    """6-parameter planar affine map: (x, y) -> (a11 x + a12 y + tx, a21 x + a22 y + ty)."""

    a11: float
    a12: float
    a21: float
    a22: float
    tx: float
    ty: float

    def __post_init__(self):
        for name in ("a11", "a12", "a21", "a22", "tx", "ty"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def identity(cls) -> "AffineModel":
        return cls(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)

    @classmethod
    def from_linear(cls, linear: np.ndarray, translation: np.ndarray) -> "AffineModel":
        a, t = np.asarray(linear, dtype=float), np.asarray(translation, dtype=float)
        return cls(a[0, 0], a[0, 1], a[1, 0], a[1, 1], t[0], t[1])

    @property
    def linear(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def compose(self, inner: "AffineModel") -> "AffineModel":
        """Model applying `inner` first, then this one."""
        lin = self.linear @ inner.linear
        tr = self.linear @ inner.translation + self.translation
        return AffineModel.from_linear(lin, tr)

    def to_list(self) -> list[float]:
        """Row-major 2x3 coefficients: [a11, a12, tx, a21, a22, ty]."""
        return [self.a11, self.a12, self.tx, self.a21, self.a22, self.ty]

    @classmethod
    def from_list(cls, coeffs) -> "AffineModel":
        a11, a12, tx, a21, a22, ty = (float(v) for v in coeffs)
        return cls(a11, a12, a21, a22, tx, ty)


def affine_apply(m: AffineModel, pt) -> tuple[float, float]:
    x, y = float(pt[0]), float(pt[1])
    return (m.a11 * x + m.a12 * y + m.tx, m.a21 * x + m.a22 * y + m.ty)


def affine_apply_many(m: AffineModel, pts: np.ndarray) -> np.ndarray:
    """Apply to an (n, 2) array of points."""
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ m.linear.T + m.translation


def affine_invert(m: AffineModel) -> AffineModel:
    d = m.det()
    if abs(d) <= 1e-9:
        raise DegenerateConfigurationError(f"affine model is near-singular (det {d:.3e})")
    inv_lin = np.array([[m.a22, -m.a12], [-m.a21, m.a11]]) / d
    inv_tr = -inv_lin @ m.translation
    return AffineModel.from_linear(inv_lin, inv_tr)


def warp_grid(src: Raster, map_x: np.ndarray, map_y: np.ndarray, fill: float = 0.0) -> Raster:
    """Bilinear-sample `src` at precomputed per-pixel source coordinates."""
    out = np.empty((map_x.shape[0], map_x.shape[1], src.channels), dtype=np.uint8)
    for c in range(src.channels):
        vals = sample_bilinear(src.data[:, :, c].astype(np.float64), map_x, map_y, fill=fill)
        out[:, :, c] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    return Raster(out)


def affine_grid(m: AffineModel, out_width: int, out_height: int) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates m(u, v) for every output pixel (u, v) of the given size."""
    us, vs = np.meshgrid(np.arange(out_width, dtype=np.float64), np.arange(out_height, dtype=np.float64))
    mx = m.a11 * us + m.a12 * vs + m.tx
    my = m.a21 * us + m.a22 * vs + m.ty
    return mx, my


def warp_affine(src: Raster, m: AffineModel, out_width: int, out_height: int, fill: float = 0.0) -> Raster:
    """Warp `src` with a source->target model `m`, producing a target-frame raster.

    Inverse mapping: each output pixel samples src at inverse(m)(u, v) with
    bilinear interpolation; pixels with no source data get the fill value.
    """
    inv = affine_invert(m)
    mx, my = affine_grid(inv, out_width, out_height)
    return warp_grid(src, mx, my, fill)


# Quadratic monomial basis shared by fitting and evaluation: 1, x, y, x^2, xy, y^2.
def _quad_basis(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.stack([np.ones_like(x), x, y, x * x, x * y, y * y], axis=-1)


def _expand_local_coeffs(a: np.ndarray, cx: float, cy: float, s: float) -> np.ndarray:
    """Rewrite coefficients fit in the centered frame u=(x-cx)/s, v=(y-cy)/s
    into the plain 1, x, y, x^2, xy, y^2 basis."""
    a0, a1, a2, a3, a4, a5 = a
    s2 = s * s
    return np.array(
        [
            a0 - a1 * cx / s - a2 * cy / s + (a3 * cx * cx + a4 * cx * cy + a5 * cy * cy) / s2,
            a1 / s - (2 * a3 * cx + a4 * cy) / s2,
            a2 / s - (2 * a5 * cy + a4 * cx) / s2,
            a3 / s2,
            a4 / s2,
            a5 / s2,
        ]
    )


@dataclass(frozen=True)
class LwmControlPoint:
    """One control anchor with its local quadratic map and radius of influence."""

    anchor: tuple[float, float]
    coeffs_x: np.ndarray
    coeffs_y: np.ndarray
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidModelError(f"control radius must be positive, got {self.radius}")
        for name in ("coeffs_x", "coeffs_y"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (6,):
                raise InvalidModelError(f"{name} must have 6 entries")
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "anchor", (float(self.anchor[0]), float(self.anchor[1])))


@dataclass(frozen=True)
class LwmModel:
    """Local-weighted-mean transform: a set of control points with local quadratics."""

    controls: tuple[LwmControlPoint, ...]
    n_neighbors: int

    def __post_init__(self):
        object.__setattr__(self, "controls", tuple(self.controls))
        if len(self.controls) == 0:
            raise InvalidModelError("LWM model needs at least one control point")

    def to_dict(self) -> dict:
        return {
            "n_neighbors": self.n_neighbors,
            "controls": [
                {
                    "anchor": list(c.anchor),
                    "radius": c.radius,
                    "coeffs_x": c.coeffs_x.tolist(),
                    "coeffs_y": c.coeffs_y.tolist(),
                }
                for c in self.controls
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LwmModel":
        controls = tuple(
            LwmControlPoint(
                anchor=tuple(c["anchor"]),
                coeffs_x=np.asarray(c["coeffs_x"], dtype=np.float64),
                coeffs_y=np.asarray(c["coeffs_y"], dtype=np.float64),
                radius=float(c["radius"]),
            )
            for c in doc["controls"]
        )
        return cls(controls=controls, n_neighbors=int(doc["n_neighbors"]))


def lwm_weight(r):
    """Blending weight W(R) = 1 - 3R^2 + 2R^3 on [0, 1): W(0)=1, W(1)=0, W'(1)=0."""
    r = np.asarray(r, dtype=np.float64)
    w = 1.0 - 3.0 * r * r + 2.0 * r * r * r
    return np.where(r < 1.0, w, 0.0)


def fit_lwm(pairs, n_neighbors: int) -> LwmModel:
    """Fit one local quadratic per control pair over its nearest input anchors.

    `pairs` is a sequence of (input_point, output_point). Each control's two
    polynomials (output x and output y over the input plane) are least-squares
    fit on the n_neighbors input anchors nearest to it, itself included; its
    radius is the distance to the n-th nearest anchor.
    """
    pairs = list(pairs)
    if n_neighbors < 6:
        raise InvalidArgumentError(f"n_neighbors must be >= 6, got {n_neighbors}")
    if len(pairs) < n_neighbors:
        raise InsufficientControlPointsError(
            f"need at least {n_neighbors} control pairs, got {len(pairs)}"
        )
    src = np.array([[p[0][0], p[0][1]] for p in pairs], dtype=np.float64)
    dst = np.array([[p[1][0], p[1][1]] for p in pairs], dtype=np.float64)

    tree = cKDTree(src)
    min_dist, _ = tree.query(src, k=2)
    dup = np.nonzero(min_dist[:, 1] < 1e-6)[0]
    if dup.size:
        raise InvalidArgumentError(f"duplicate input anchors at indices {dup[:4].tolist()}")

    dists, idx = tree.query(src, k=n_neighbors)
    controls = []
    for i in range(len(pairs)):
        nb = idx[i]
        pts = src[nb]
        outs = dst[nb]
        cx, cy = pts.mean(axis=0)
        scale = float(np.sqrt(((pts - [cx, cy]) ** 2).sum(axis=1).mean()))
        if scale < 1e-9:
            scale = 1.0
        u = (pts[:, 0] - cx) / scale
        v = (pts[:, 1] - cy) / scale
        basis = _quad_basis(u, v)
        sol, _, rank, _ = np.linalg.lstsq(basis, outs, rcond=None)
        if rank < 6:
            raise DegenerateNeighborhoodError(
                f"rank-deficient neighborhood around anchor {i} at {tuple(src[i])}", anchor_index=i
            )
        controls.append(
            LwmControlPoint(
                anchor=(src[i, 0], src[i, 1]),
                coeffs_x=_expand_local_coeffs(sol[:, 0], cx, cy, scale),
                coeffs_y=_expand_local_coeffs(sol[:, 1], cx, cy, scale),
                radius=float(dists[i, -1]),
            )
        )
    return LwmModel(controls=tuple(controls), n_neighbors=n_neighbors)


def _model_arrays(model: LwmModel) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    anchors = np.array([c.anchor for c in model.controls])
    radii = np.array([c.radius for c in model.controls])
    cx = np.stack([c.coeffs_x for c in model.controls])
    cy = np.stack([c.coeffs_y for c in model.controls])
    return anchors, radii, cx, cy


def lwm_apply_many(model: LwmModel, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply the model to an (n, 2) point array.

    Returns (outputs (n, 2), extrapolated (n,) bool). Points outside every
    control's influence radius fall back to the single nearest control's
    polynomial and are flagged as extrapolated.
    """
    anchors, radii, coef_x, coef_y = _model_arrays(model)
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    out = np.empty_like(pts)
    extrapolated = np.zeros(len(pts), dtype=bool)

    # Chunk over points to bound the (points x controls) working set.
    chunk = max(1, int(4_000_000 / max(1, len(anchors))))
    for start in range(0, len(pts), chunk):
        p = pts[start : start + chunk]
        basis = _quad_basis(p[:, 0], p[:, 1])  # (n, 6)
        px = basis @ coef_x.T  # (n, controls)
        py = basis @ coef_y.T
        d = np.sqrt(
            (p[:, 0:1] - anchors[np.newaxis, :, 0]) ** 2
            + (p[:, 1:2] - anchors[np.newaxis, :, 1]) ** 2
        )
        w = lwm_weight(d / radii[np.newaxis, :])
        wsum = w.sum(axis=1)
        covered = wsum > 0
        ox = np.empty(len(p))
        oy = np.empty(len(p))
        with np.errstate(invalid="ignore"):
            ox[covered] = (w * px)[covered].sum(axis=1) / wsum[covered]
            oy[covered] = (w * py)[covered].sum(axis=1) / wsum[covered]
        if not covered.all():
            nearest = np.argmin(d[~covered], axis=1)
            rows = np.nonzero(~covered)[0]
            ox[rows] = px[rows, nearest]
            oy[rows] = py[rows, nearest]
        out[start : start + chunk, 0] = ox
        out[start : start + chunk, 1] = oy
        extrapolated[start : start + chunk] = ~covered
    return out, extrapolated


def lwm_apply(model: LwmModel, pt) -> tuple[float, float]:
    """Apply the model to a single point; total function (nearest-control fallback)."""
    out, _ = lwm_apply_many(model, np.array([[pt[0], pt[1]]]))
    return (float(out[0, 0]), float(out[0, 1]))


def lwm_grid(model: LwmModel, out_width: int, out_height: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Model applied to every pixel of an output grid.

    Returns (map_x, map_y, extrapolated), each shaped (out_height, out_width).
    """
    us, vs = np.meshgrid(np.arange(out_width, dtype=np.float64), np.arange(out_height, dtype=np.float64))
    pts = np.column_stack([us.ravel(), vs.ravel()])
    mapped, extrapolated = lwm_apply_many(model, pts)
    shape = (out_height, out_width)
    return mapped[:, 0].reshape(shape), mapped[:, 1].reshape(shape), extrapolated.reshape(shape)


def warp_lwm(src: Raster, inverse_model: LwmModel, out_width: int, out_height: int, fill: float = 0.0) -> Raster:
    """Warp with an inverse-orientation model (output coords -> source coords).

    The pipeline fits this model on swapped pairs (target point, source point),
    so each output pixel samples src directly at the model's value.
    """
    mx, my, _ = lwm_grid(inverse_model, out_width, out_height)
    return warp_grid(src, mx, my, fill)
