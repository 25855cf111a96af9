"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all engine-specific failures."""


class FormatError(EngineError):
    """Malformed binary stream; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateTransformError(EngineError):
    """Transform has no usable scale (non-positive or non-finite)."""


class DegenerateCorrespondenceError(EngineError):
    """Coincident points make the two-point solve underdetermined."""


class NoCandidatesError(EngineError):
    """Nearest-neighbor search over an empty mask."""


class NoCorrespondencesError(EngineError):
    """Estimation invoked with an empty correspondence list."""


class InsufficientDataError(EngineError):
    """Fewer correspondences than the estimator needs."""


class InvalidWeightsError(EngineError):
    """Regressor weight shapes do not chain."""


class UnreliableAngleError(EngineError):
    """In-plane head emitted a near-zero (cos, sin) vector."""


class DegenerateBatchError(EngineError):
    """Contrastive batch has no negative pairs."""


class EstimationFailedError(EngineError):
    """All candidate templates failed; carries per-template diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InvalidModelError(EngineError):
    """Object model violates its invariants (too few points, bad symmetry)."""


class BehindCameraError(EngineError):
    """Projection requested for a point with non-positive depth."""


class OnboardingError(EngineError):
    """Template store construction failed validation."""
