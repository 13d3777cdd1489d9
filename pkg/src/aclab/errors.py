"""Exception hierarchy shared by every stage of the pipeline."""


class ACLabError(Exception):
    """Base class for all errors raised by aclab."""


class GridError(ACLabError, ValueError):
    pass


class NonFiniteField(ACLabError, ValueError):
    pass


class NotCritical(ACLabError, ValueError):
    """The input field does not solve the Allen-Cahn equation to tolerance."""


class SupportError(ACLabError, ValueError):
    """A test function does not vanish outside its declared mask."""


class NonConvergence(ACLabError, RuntimeError):
    def __init__(self, message, *, steps=None, residual=None):
        super().__init__(message)
        self.steps = steps
        self.residual = residual


class Divergence(ACLabError, RuntimeError):
    pass


class SingularJacobian(ACLabError, RuntimeError):
    pass


class IndexViolation(ACLabError, RuntimeError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class DegeneratePath(ACLabError, ValueError):
    pass


class ScheduleError(ACLabError, ValueError):
    pass


class EmptyRegion(ACLabError, ValueError):
    pass


class NoConvergence(ACLabError, RuntimeError):
    """Eigensolver failure; ``achieved`` holds the number of converged pairs."""

    def __init__(self, message, achieved=0):
        super().__init__(message)
        self.achieved = achieved


class MonotonicityViolation(ACLabError, AssertionError):
    def __init__(self, message, q=None):
        super().__init__(message)
        self.q = q


class CoverageFailure(ACLabError, ValueError):
    pass


class NotStableInBall(ACLabError, ValueError):
    pass


class DegenerateLevelSet(ACLabError, ValueError):
    pass


class MultiplicityAmbiguous(ACLabError, ValueError):
    def __init__(self, message, ratio=None):
        super().__init__(message)
        self.ratio = ratio


class TubeOverlap(ACLabError, ValueError):
    pass


class ZeroNorm(ACLabError, ValueError):
    pass


class InsufficientSchedule(ACLabError, ValueError):
    pass


class UnsupportedMetric(ACLabError, ValueError):
    pass


class ConfigError(ACLabError, ValueError):
    pass
