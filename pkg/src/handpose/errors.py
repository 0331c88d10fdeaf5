"""Exception types raised across the package."""


class HandPoseError(Exception):
    """Base class for all package errors."""


class ConfigError(HandPoseError):
    pass


class BoundsError(HandPoseError, IndexError):
    """Pixel coordinate outside the image grid."""


class BackgroundPixelError(HandPoseError):
    """Operation requires a foreground depth but the pixel is background."""


class DegenerateDepthError(HandPoseError):
    """3D point with non-positive depth cannot be projected."""


class SkeletonMismatchError(HandPoseError):
    pass


class DegeneratePoseError(HandPoseError):
    """Pose geometry too degenerate to work with (e.g. zero-length direction)."""


class EmptyMaskError(HandPoseError):
    pass


class DegenerateMaskError(HandPoseError):
    pass


class NoHandError(HandPoseError):
    """Image contains no foreground pixels."""


class EmptyTrainingError(HandPoseError):
    pass


class DataError(HandPoseError):
    """Bad training/evaluation data; message names the offending sample."""


class DataFormatError(HandPoseError):
    """Malformed dataset file; message carries file name and diagnostics."""


class ModelFormatError(HandPoseError):
    """Malformed model file.

    Attributes:
        offset: byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ModelVersionError(ModelFormatError):
    """Model file has an unsupported format version."""

    def __init__(self, message, offset=None):
        super().__init__(message, offset)
