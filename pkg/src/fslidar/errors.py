"""Exception types raised across the package."""


class FslidarError(Exception):
    pass


# class space
class OverlappingClassSets(FslidarError, ValueError):
    pass


class EmptyNovelSet(FslidarError, ValueError):
    pass


class UnknownLabel(FslidarError, ValueError):
    pass


# point cloud I/O and projection
class MalformedFile(FslidarError, ValueError):
    pass


class LabelCountMismatch(FslidarError, ValueError):
    pass


class DegenerateFov(FslidarError, ValueError):
    pass


class ShapeMismatch(FslidarError, ValueError):
    pass


# synthetic scenes
class EmptyScene(FslidarError, ValueError):
    pass


# losses
class InvalidLabel(FslidarError, ValueError):
    pass


class NonFiniteLogit(FslidarError, ValueError):
    pass


class NotASimplexRow(FslidarError, ValueError):
    pass


class BaseLabelInNovelStage(FslidarError, ValueError):
    pass


class TeacherShapeMismatch(FslidarError, ValueError):
    pass


# network / adapters
class NoForwardState(FslidarError, RuntimeError):
    pass


class HeadAlreadyAttached(FslidarError, RuntimeError):
    pass


class NoSuchLayer(FslidarError, KeyError):
    pass


class RankTooLarge(FslidarError, ValueError):
    pass


class NoAdaptersAttached(FslidarError, RuntimeError):
    pass


# tracking
class MissingPose(FslidarError, ValueError):
    pass


class AnnotationOutOfRange(FslidarError, IndexError):
    pass


# training
class DivergedLoss(FslidarError, FloatingPointError):
    pass


class InsufficientScans(FslidarError, ValueError):
    pass


# metrics
class LengthMismatch(FslidarError, ValueError):
    pass


class EmptySubset(FslidarError, ValueError):
    pass
