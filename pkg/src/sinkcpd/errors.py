"""Exception types shared across the package."""


class InputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericalError(ArithmeticError):
    """Raised when a solver produces non-finite values despite stabilization."""


class TrainingError(RuntimeError):
    """Raised when metric training diverges.

    ``last_finite_iteration`` is the index of the last iteration whose loss
    was finite, or -1 if the very first evaluation already diverged.
    """

    def __init__(self, message, last_finite_iteration=-1):
        super().__init__(message)
        self.last_finite_iteration = last_finite_iteration
