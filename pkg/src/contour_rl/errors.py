"""Exception hierarchy shared across the package."""


class ContourRLError(Exception):
    pass


# contour data
class ContourError(ContourRLError):
    pass


class EmptyMask(ContourError):
    pass


class MultipleComponents(ContourError):
    pass


class OpenCurve(ContourError):
    pass


class NotAThinRing(ContourError):
    pass


class DegenerateContour(ContourError):
    pass


class GeometryOverflow(ContourError):
    pass


class ParseError(ContourRLError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BoundsError(ContourRLError):
    pass


# environment
class PositionOutOfImage(ContourRLError):
    pass


class EpisodeFinished(ContourRLError):
    pass


# networks
class ShapeMismatch(ContourRLError):
    pass


class CheckpointError(ContourRLError):
    pass


# training
class NonFiniteRatio(ContourRLError):
    pass


class Stalled(ContourRLError):
    """Line search could not find a descent step; treated as convergence."""


class ImageTooSmall(ContourRLError):
    pass


class EmptyTarget(ContourRLError):
    pass


# metrics
class BothEmpty(ContourRLError):
    pass


class EmptySet(ContourRLError):
    pass


class DegenerateTrace(ContourRLError):
    pass
