"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violates an operation's precondition."""


class DimensionError(ContractError):
    """Tensor extents are incompatible with the requested operation."""


class DivergenceError(FloatingPointError):
    """Optimization produced a non-finite loss or gradient."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
