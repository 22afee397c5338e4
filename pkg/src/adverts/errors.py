"""Shared exception hierarchy."""


class AdvertsError(Exception):
    """Base class for all errors raised by this package."""


class MediaStoreError(AdvertsError):
    pass


class GeometryError(AdvertsError):
    pass


class BehindCameraError(GeometryError):
    """Point at or behind the camera plane; cannot be projected."""


class DegenerateGeometryError(GeometryError):
    """Zero baseline, near-parallel rays, or collinear configurations."""


class InsufficientDataError(AdvertsError):
    """Too few points/pixels/correspondences to run an operation."""


class TrackingError(AdvertsError):
    pass


class DepthError(AdvertsError):
    pass


class NonPlanarRegionError(DepthError):
    """RANSAC could not find a dominant plane under the clicked window."""


class SegmentationError(AdvertsError):
    pass


class MattingError(AdvertsError):
    pass


class RenderError(AdvertsError):
    pass


class PipelineError(AdvertsError):
    pass


class StaleCheckpointError(PipelineError):
    """Checkpoint inputs no longer match what is on disk; restart required."""


class AuthError(AdvertsError):
    pass
