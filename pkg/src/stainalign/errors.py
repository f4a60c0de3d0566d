"""Exception taxonomy shared by all stainalign modules."""


class StainAlignError(Exception):
    """Base class for all errors raised by this package."""


class InvalidChannelError(StainAlignError, ValueError):
    """Operation requires a different channel count than the input has."""


class InvalidArgumentError(StainAlignError, ValueError):
    """An argument violates the operation's precondition."""


class ShapeError(StainAlignError, ValueError):
    """Array or image dimensions do not match."""


class ConfigError(StainAlignError, ValueError):
    """Configuration document is malformed or contains unknown keys."""


class DegenerateStainError(StainAlignError, ValueError):
    """Stain matrix is singular or nearly so."""


class InsufficientResolutionError(StainAlignError, ValueError):
    """Image is too small for the requested operation."""


class InsufficientCorrespondencesError(StainAlignError, ValueError):
    """Fewer point pairs than the estimator needs."""


class DegenerateConfigurationError(StainAlignError, ValueError):
    """Point configuration (e.g. collinear sources) admits no unique model."""


class ConsensusFailureError(StainAlignError, RuntimeError):
    """Robust matching could not assemble a large enough inlier set."""


class InsufficientControlPointsError(StainAlignError, ValueError):
    """Fewer control pairs than neighbors requested for a local fit."""


class DegenerateNeighborhoodError(StainAlignError, ValueError):
    """A control point's neighborhood is rank-deficient (e.g. collinear)."""

    def __init__(self, message: str, anchor_index: int):
        super().__init__(message)
        self.anchor_index = anchor_index


class InvalidModelError(StainAlignError, ValueError):
    """Transform model is unusable (e.g. zero control points)."""


class PrealignmentFailedError(StainAlignError, RuntimeError):
    """Step-1 affine registration failed; carries stage diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class RefinementFailedError(StainAlignError, RuntimeError):
    """Step-2 non-rigid refinement failed; carries stage diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
