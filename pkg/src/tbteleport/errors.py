"""Exception types shared across the package."""


class DomainError(ValueError):
    """A parameter lies outside the range where a model is defined."""


class NoHeraldError(ArithmeticError):
    """No valid heralding event has nonzero probability."""


class UndefinedVisibilityError(ArithmeticError):
    """The distinguishable coincidence probability vanishes."""


class TruncationError(RuntimeError):
    """A Fock-space operation exceeded the configured photon-number cap."""
