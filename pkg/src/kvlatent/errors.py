"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: validation errors exit 2, numerical
failures exit 3, I/O problems (plain OSError) exit 4.
"""


class ValidationError(ValueError):
    """Bad shapes, arguments, file schemas, or infeasible requests."""


class NumericalError(ArithmeticError):
    """Numerically impossible operation: non-PSD input, singular whitener,
    or a decomposition that failed to converge."""
