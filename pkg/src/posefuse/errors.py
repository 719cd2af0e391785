"""Exception types shared across the toolkit.

Every failure mode that callers are expected to branch on gets its own
class; generic misuse raises plain ValueError.
"""


class PosefuseError(Exception):
    """Base class for all toolkit-specific errors."""


class ShapeMismatchError(PosefuseError):
    """An array does not have the shape declared by its contract."""


class ManifestError(PosefuseError):
    """A manifest file is missing, unparsable, or structurally invalid."""


class MissingBlobError(PosefuseError):
    """A blob file referenced by a manifest is absent."""


class BackboneUnavailableError(PosefuseError):
    """The diffusion backbone adapter has no backbone to call."""


class StaleGalleryError(PosefuseError):
    """Gallery feature cache was built with a different model."""


class InsufficientNegativesError(PosefuseError):
    """Template pool too small to draw the requested negatives."""


class CheckpointVersionError(PosefuseError):
    """Checkpoint on disk uses an unsupported format version."""


class LossDivergedError(PosefuseError):
    """Training hit a non-finite loss.

    Carries the last checkpoint taken before the offending update so the
    run can be salvaged.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
