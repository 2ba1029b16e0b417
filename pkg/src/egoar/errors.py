"""Exception types shared across the pipeline."""


class EgoarError(Exception):
    """Base class for all egoar errors."""


# geometry
class NonPositiveDepth(EgoarError):
    """Projection or back-projection requested at depth <= 0."""


# depth context separation
class DimensionMismatch(EgoarError):
    """Arrays that must share a shape do not."""


class EmptyHistogram(EgoarError):
    """Depth histogram has no unexcluded pixels."""


class DegenerateSeparation(EgoarError):
    """Depth histogram is unimodal; no cabin/road threshold exists."""


# mask lifecycle
class AdapterFailure(EgoarError):
    """A perception backend raised; wraps the original error."""


# pose tracking
class InsufficientCorrespondences(EgoarError):
    """Fewer matched observations than the solver minimum."""


class Diverged(EgoarError):
    """Pose refinement could not find a cost-decreasing step."""


class DegenerateBaseline(EgoarError):
    """Triangulation requested from two nearly identical viewpoints."""


class BehindCamera(EgoarError):
    """A triangulated or projected point has non-positive camera depth."""


class FrameNotFound(EgoarError):
    """A referenced frame index is absent from the trajectory."""


# recommendation
class SchemaError(EgoarError):
    """Structured recommendation document is malformed."""


class UnknownLabel(EgoarError):
    """Overlay label not in the closed label set."""


class BoxOutOfRange(EgoarError):
    """Bounding box far outside the image; likely hallucinated geometry."""


# anchoring
class AnchorNotFound(EgoarError):
    """No map points project inside the requested bounding box."""


# evaluation
class EmptyReport(EgoarError):
    """Aggregation requested over zero error values."""


class IndexMismatch(EgoarError):
    """Trajectories being compared cover different frame indices."""


# simulator I/O
class SpecValidation(EgoarError):
    """Scene specification is internally inconsistent."""


class ManifestError(EgoarError):
    """Sequence manifest missing, malformed, or missing channels."""


class ChecksumMismatch(EgoarError):
    """A sequence file does not match its manifest checksum."""


# CLI / orchestration
class ConfigError(EgoarError):
    """Run configuration invalid (unknown key, bad type, bad value)."""


class MissingInput(EgoarError):
    """A stage's required upstream artifact is absent."""


class StageFailure(EgoarError):
    """A pipeline stage failed; carries stage attribution."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause!r}")
        self.stage = stage
        self.cause = cause
