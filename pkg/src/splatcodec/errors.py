class SplatcodecError(Exception):
    """Base class for all library errors."""


class InvalidModelError(SplatcodecError):
    """A scene model or primitive violates a structural invariant."""


class BitstreamError(SplatcodecError):
    """A bitstream is malformed, truncated, or of an unsupported version."""


class SceneDataError(SplatcodecError):
    """Scene inputs (images, cameras, point cloud, config) are missing or inconsistent."""
