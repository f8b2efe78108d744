"""Exception hierarchy.

Errors fall into three families that the CLI maps onto exit codes:
configuration problems, data problems, and numerical failures.
"""


class ArmPoseError(Exception):
    """Base class for all package errors."""


class ConfigError(ArmPoseError, ValueError):
    pass


class DataError(ArmPoseError, ValueError):
    pass


class NumericalError(ArmPoseError, ArithmeticError):
    pass


class DimensionMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class EmptyMaskSet(DataError):
    pass


class EmptySampleSet(DataError):
    pass


class NoValidKeypoints(DataError):
    pass


class NonSquarePatchCount(ConfigError):
    pass


class InvalidCamera(DataError):
    """Raised when the arm cannot be placed inside the camera frustum."""


class InfeasiblePlacement(DataError):
    """Raised when an occluder cannot be placed over the robot region."""


class NonPositiveDepth(NumericalError):
    pass


class TooFewPoints(NumericalError):
    pass


class DegenerateConfiguration(NumericalError):
    pass
