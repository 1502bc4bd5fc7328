"""Exception hierarchy.

Errors fall into three families that the command line maps onto exit codes:
configuration problems (2), numerical failures (3) and file/data problems (4).
"""


class TreeSBError(Exception):
    """Base class for all package errors."""


class ConfigError(TreeSBError, ValueError):
    """Invalid user input: trees, weights, experiment configs."""


class NumericalError(TreeSBError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class DataError(TreeSBError, OSError):
    """Unreadable or malformed data files."""


# tree validation


class TreeValidationError(ConfigError):
    pass


class CycleDetected(TreeValidationError):
    pass


class Disconnected(TreeValidationError):
    pass


class NonPositiveLength(TreeValidationError):
    pass


class UnobservedLeaf(TreeValidationError):
    pass


class TooFewObserved(TreeValidationError):
    pass


class RootNotObserved(TreeValidationError):
    pass


class WeightsNotNormalised(ConfigError):
    pass


class NonPositiveWeight(ConfigError):
    pass


class DimensionMismatch(ConfigError):
    pass


class MarginalDimensionMismatch(DimensionMismatch):
    pass


class TimeOutOfRange(ConfigError):
    pass


class TimeAtTerminal(ConfigError):
    pass


class PolicyMismatch(ConfigError):
    pass


class CheckpointMismatch(ConfigError):
    pass


# numerics


class SingularUnobservedBlock(NumericalError):
    pass


class NonFiniteGradient(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class NonFiniteState(NumericalError):
    pass


class NonPSDInput(NumericalError):
    pass


class DegenerateReference(NumericalError):
    pass


class MaxIterExceeded(NumericalError):
    pass


class GridTooSmall(NumericalError):
    pass


class NotConverged(NumericalError):
    pass


class NotConvergedWarning(RuntimeWarning):
    """Iterative solver stopped at ``max_iter``; the returned value is approximate."""


# data


class CsvParse(DataError):
    pass


class EmptyFile(DataError):
    pass
