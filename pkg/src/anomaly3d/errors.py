"""Exception hierarchy shared by every module.

Each error carries enough context in its message to be reported verbatim by
the CLI (exit code 1).
"""


class Anomaly3DError(Exception):
    """Base class for all library errors."""


class InvalidInput(Anomaly3DError, ValueError):
    """Input violates a documented invariant."""


class KTooLarge(InvalidInput):
    pass


class CountTooLarge(InvalidInput):
    pass


class EmptySet(InvalidInput):
    pass


class EmptyCloud(EmptySet):
    pass


class InsufficientNeighbors(InvalidInput):
    def __init__(self, index: int, found: int, required: int = 3):
        self.index = index
        super().__init__(
            f"point {index} has {found} neighbors within radius, need >= {required}"
        )


class IsolatedPoint(InvalidInput):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"point {index} has no neighbors within radius")


class InvalidMesh(InvalidInput):
    pass


class EmptyMesh(InvalidMesh):
    pass


class CannotSatisfyFraction(Anomaly3DError):
    pass


class InvalidRatio(InvalidInput):
    pass


class DegenerateMask(InvalidInput):
    pass


class ShapeMismatch(InvalidInput):
    pass


class CountMismatch(ShapeMismatch):
    pass


class ConfigError(InvalidInput):
    pass


class EmptyDataset(Anomaly3DError):
    pass


class NonFiniteLoss(Anomaly3DError):
    pass


class UntrainedModel(Anomaly3DError):
    pass


class InvalidIterations(InvalidInput):
    pass


class TemplateMismatch(Anomaly3DError):
    pass


class SingleClass(InvalidInput):
    pass


class NoRegions(InvalidInput):
    pass


class MissingModel(Anomaly3DError):
    pass


class ManifestMismatch(Anomaly3DError):
    pass


class FormatError(Anomaly3DError):
    """A file on disk does not follow the expected layout."""
