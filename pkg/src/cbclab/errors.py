"""Exception types raised across the package."""


class CbcError(Exception):
    """Base class for all errors raised by cbclab."""


class DisplacementLimitExceeded(CbcError):
    """The simulated mass left the permitted displacement range.

    ``record`` holds the samples collected up to the violation (may be None).
    """

    def __init__(self, message, record=None, time=None):
        super().__init__(message)
        self.record = record
        self.time = time


class PhaseMisaligned(CbcError):
    pass


class NonIntegerPeriodSpan(CbcError):
    pass


class DelayTooLong(CbcError):
    pass


class NotSettled(CbcError):
    pass


class FixedPointDiverged(CbcError):
    def __init__(self, message, grid_index=None, residual=None):
        super().__init__(message)
        self.grid_index = grid_index
        self.residual = residual


class RankDeficient(CbcError):
    pass


class SingularB0(CbcError):
    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class NotPeriodic(CbcError):
    pass


class ShootingDiverged(CbcError):
    pass


class IllConditionedKernel(CbcError):
    pass


class OptimFailed(CbcError):
    pass


class NoIntersection(CbcError):
    pass


class NoFold(CbcError):
    pass


class EscapeTimeout(CbcError):
    pass


class ConfigError(CbcError):
    pass
