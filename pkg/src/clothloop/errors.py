"""Exception hierarchy for clothloop."""


class ClothLoopError(Exception):
    """Base class for every error raised by clothloop."""


class InputError(ClothLoopError, ValueError):
    """Invalid meshes, scenarios, shapes, files or indices."""


class NumericalError(ClothLoopError, ArithmeticError):
    """NaN, divergence or a singular system inside a numerical routine."""


class EstimationAborted(NumericalError):
    """State estimation backtracked twice in a row on the same frame."""
