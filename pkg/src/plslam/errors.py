"""Exception types raised across the library."""


class PLSlamError(Exception):
    """Base class for all library errors."""


class NonPositiveDepth(PLSlamError):
    pass


class DegenerateDisparity(PLSlamError):
    pass


class DegenerateSegment(PLSlamError):
    pass


class InsufficientMatches(PLSlamError):
    pass


class SolverDiverged(PLSlamError):
    pass


class IllConditioned(PLSlamError):
    pass


class SingularCovariance(PLSlamError):
    pass


class DuplicateId(PLSlamError):
    pass


class UnknownKeyFrame(PLSlamError):
    pass


class NoFeatures(PLSlamError):
    pass


class Disconnected(PLSlamError):
    pass


class NoAssociation(PLSlamError):
    pass


class EmptySeries(PLSlamError):
    pass


class TrajectoryTooShort(PLSlamError):
    pass


class TrackingLost(PLSlamError):
    pass


class SchemaError(PLSlamError):
    """Malformed input record. ``line`` is the 1-based line number, if known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
