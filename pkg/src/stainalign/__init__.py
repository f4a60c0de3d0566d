"""stainalign: two-step automatic cross-stain image registration.

Affine pre-alignment from scale-invariant keypoint correspondences filtered
by a deterministic sample-consensus scheme, followed by local-weighted-mean
non-rigid refinement, with a Jaccard-based evaluation harness and a
synthetic-deformation generator for ground-truth testing.
"""

from .errors import (
    ConfigError,
    ConsensusFailureError,
    DegenerateConfigurationError,
    DegenerateNeighborhoodError,
    DegenerateStainError,
    InsufficientControlPointsError,
    InsufficientCorrespondencesError,
    InsufficientResolutionError,
    InvalidArgumentError,
    InvalidChannelError,
    InvalidModelError,
    PrealignmentFailedError,
    RefinementFailedError,
    ShapeError,
    StainAlignError,
)
from .evalkit import Metrics, SynthSpec, SynthTruth, evaluate, jaccard, landmark_error, synth_pair, synthetic_histology
from .features import FeatureSet, Keypoint, SiftParams, detect_and_describe
from .geometry import AffineModel, LwmModel, affine_apply, affine_invert, fit_lwm, lwm_apply, warp_affine, warp_lwm
from .matching import Correspondence, FscParams, estimate_affine_lsq, fsc_filter, match_descriptors, ransac_filter
from .pipeline import PipelineConfig, RegistrationResult, prealign, refine_nonrigid, register
from .preprocess import PreprocessConfig, StainMatrix, color_deconvolve, enhance_contrast, tissue_mask
from .raster import BinaryMask, FloatRaster, Raster, bilinear_sample, downscale, load_image, save_image, to_grayscale

__version__ = "0.1.0"

__all__ = [
    "AffineModel",
    "BinaryMask",
    "ConfigError",
    "ConsensusFailureError",
    "Correspondence",
    "DegenerateConfigurationError",
    "DegenerateNeighborhoodError",
    "DegenerateStainError",
    "FeatureSet",
    "FloatRaster",
    "FscParams",
    "InsufficientControlPointsError",
    "InsufficientCorrespondencesError",
    "InsufficientResolutionError",
    "InvalidArgumentError",
    "InvalidChannelError",
    "InvalidModelError",
    "Keypoint",
    "LwmModel",
    "Metrics",
    "PipelineConfig",
    "PrealignmentFailedError",
    "PreprocessConfig",
    "Raster",
    "RefinementFailedError",
    "RegistrationResult",
    "ShapeError",
    "SiftParams",
    "StainAlignError",
    "StainMatrix",
    "SynthSpec",
    "SynthTruth",
    "affine_apply",
    "affine_invert",
    "bilinear_sample",
    "color_deconvolve",
    "detect_and_describe",
    "downscale",
    "enhance_contrast",
    "estimate_affine_lsq",
    "evaluate",
    "fit_lwm",
    "fsc_filter",
    "jaccard",
    "landmark_error",
    "load_image",
    "lwm_apply",
    "match_descriptors",
    "prealign",
    "ransac_filter",
    "refine_nonrigid",
    "register",
    "save_image",
    "synth_pair",
    "synthetic_histology",
    "tissue_mask",
    "to_grayscale",
    "warp_affine",
    "warp_lwm",
]
