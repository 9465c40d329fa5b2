"""Exception types shared across the pipeline."""


class NevrfError(Exception):
    """Base class for all pipeline errors."""


class BehindCameraError(NevrfError):
    """Point projects at or behind the camera plane; the view cannot see it."""


class DegenerateViewError(NevrfError):
    """Camera center coincides with the query point."""


class InsufficientViewsError(NevrfError):
    """Fewer eligible source views than requested."""


class NoVisibilityError(NevrfError):
    """No valid source view sees the sample point."""


class OutOfBoundsError(NevrfError):
    """Query point outside the grid bounding box (or pixel outside the image)."""


class ShapeError(NevrfError):
    """Tensor shape mismatch."""


class TapeError(NevrfError):
    """Backward called with a stale or mismatched forward tape."""


class DivergedError(NevrfError):
    """Optimization produced a non-finite loss."""


class FormatError(NevrfError):
    """Malformed binary container or file."""


class SvdError(NevrfError):
    """Singular value decomposition failed to converge."""
