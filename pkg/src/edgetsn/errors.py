"""Exception hierarchy shared by every module."""


class EdgeTSNError(Exception):
    """Base class for all errors raised by edgetsn."""


class ShapeError(EdgeTSNError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(EdgeTSNError, ValueError):
    """An argument violates an operation's precondition."""


class InsufficientFramesError(ContractError):
    """A clip has fewer frames than the requested number of segments."""


class StateError(EdgeTSNError, RuntimeError):
    """An object is used before it reached the required state."""


class DataError(EdgeTSNError):
    """Input data on disk is missing, malformed or undecodable."""


class InvariantError(EdgeTSNError, AssertionError):
    """An internal consistency check failed."""
