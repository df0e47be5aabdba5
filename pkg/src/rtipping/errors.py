"""Exception hierarchy shared by all solver modules."""


class RTippingError(Exception):
    """Base class for every error raised by the package."""


class InvalidParameterError(RTippingError, ValueError):
    pass


class DomainError(RTippingError, ValueError):
    pass


class MeshError(RTippingError, ValueError):
    pass


class NoConvergenceError(RTippingError):
    """Newton (or a root finder) gave up. ``last_iterate`` holds the final state."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class RefinementLimitError(RTippingError):
    pass


class WrongBranchError(RTippingError):
    pass


class StructureError(RTippingError):
    """Spectral structure differs from what the caller assumed."""


class StiffnessError(RTippingError):
    def __init__(self, message, t=None, y=None):
        super().__init__(message)
        self.t = t
        self.y = y


class SpectrumInconsistencyError(RTippingError):
    pass


class BracketError(RTippingError):
    pass


class UnresolvedError(RTippingError):
    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket


class RefinementError(RTippingError):
    pass


class TruncationError(RTippingError):
    pass


class PreconditionError(RTippingError):
    pass
