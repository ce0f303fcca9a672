"""Exception types raised across the package."""


class InputError(ValueError):
    """Invalid arguments: dimension mismatch, zero vectors, bad parameters."""


class NumericalError(ArithmeticError):
    """Non-finite values or a numerical failure inside a kernel."""


class PreconditionerError(NumericalError):
    """The preconditioner produced a step that is not SPD-compatible."""


class BreakdownError(NumericalError):
    """A search direction has non-positive energy (p, Ap) <= 0."""


class IndefiniteError(NumericalError):
    """An operator expected to be positive definite is not."""


class DimensionExhausted(NumericalError):
    """No room is left for a new A-orthogonal direction."""
