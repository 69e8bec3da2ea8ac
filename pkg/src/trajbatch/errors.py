"""Exception types shared across the solver stack."""


class DimensionError(ValueError):
    """An input's shape does not match what the operation requires."""


class ConfigError(ValueError):
    """A configuration value is invalid (bad plant period, unknown config key, ...)."""


class FactorizationError(RuntimeError):
    """A small block that must be positive definite failed to factor.

    ``knot`` identifies the trajectory knot whose block failed, or is None
    for blocks without a knot association.
    """

    def __init__(self, message: str, knot: int | None = None):
        super().__init__(message)
        self.knot = knot


class PcgBreakdownError(RuntimeError):
    """PCG hit a zero or negative curvature direction (non-SPD system).

    ``iteration`` is the 1-based PCG iteration at which the breakdown occurred.
    """

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration
