"""Exception hierarchy shared by every module."""


class TopoDepthError(Exception):
    """Base class for all package errors."""


class InvalidScene(TopoDepthError):
    pass


class PoseInsideObstacle(TopoDepthError):
    pass


class DegenerateLoop(TopoDepthError):
    pass


class TooFewPoses(TopoDepthError):
    pass


class PathTooShort(TopoDepthError):
    pass


class IndexOutOfRange(TopoDepthError, IndexError):
    pass


class AllHoles(TopoDepthError):
    pass


class HolePresent(TopoDepthError):
    pass


class OutOfRange(TopoDepthError, ValueError):
    pass


class ShapeMismatch(TopoDepthError, ValueError):
    pass


class EmptyBatch(TopoDepthError):
    pass


class NonFiniteLoss(TopoDepthError, FloatingPointError):
    pass


class VersionMismatch(TopoDepthError):
    pass


class ChecksumMismatch(TopoDepthError):
    pass


class NoValidPixels(TopoDepthError):
    pass


class LengthMismatch(TopoDepthError, ValueError):
    pass


class NodeTooSmall(TopoDepthError):
    pass


class SplitLeak(TopoDepthError):
    """Raised when training code asks the manifest loader for a test frame."""


class ConfigError(TopoDepthError, ValueError):
    pass
